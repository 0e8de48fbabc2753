#pragma once

#include <string>

#include "doctest.h"
#include "leobed/error.hpp"

// Asserts that `expr` throws leobed::Error carrying `expected_code`.
#define CHECK_THROWS_CODE(expr, expected_code)                                      \
  do {                                                                              \
    bool leobed_thrown_ = false;                                                    \
    try {                                                                           \
      (void)(expr);                                                                 \
    } catch (const ::leobed::Error& e) {                                            \
      leobed_thrown_ = true;                                                        \
      CHECK_MESSAGE(e.code() == (expected_code), "got ", std::string(e.name()));    \
    }                                                                               \
    CHECK_MESSAGE(leobed_thrown_, "expected leobed::Error from " #expr);            \
  } while (false)

inline std::string fixture(const std::string& name) {
  return std::string(LEOBED_FIXTURES) + "/" + name;
}

#include <cstdlib>
#include <filesystem>

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "leobed-test-XXXXXX").string();
    path = ::mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
};

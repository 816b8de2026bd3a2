#include "pcda/common.hpp"

#include <cstdio>

namespace pcda {

std::string hex_digest(u64 value) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace pcda

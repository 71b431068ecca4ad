#pragma once
// Checkpoint container: a short text header (format tag, named scalar meta,
// named tensor shapes) followed by the raw little-endian float64 payload in
// header order. Text header keeps the file inspectable with `head`.

#include <string>
#include <utility>
#include <vector>

#include "deshadow/tensor.hpp"

namespace deshadow {

struct Checkpoint {
  std::vector<std::pair<std::string, double>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  double meta_value(const std::string& key) const;       // throws if absent
  const Tensor& tensor(const std::string& name) const;   // throws if absent
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace deshadow

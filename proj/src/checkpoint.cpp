#include "deshadow/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace deshadow {

double Checkpoint::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  throw DomainError("checkpoint: missing meta key '" + key + "'");
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [k, t] : tensors) {
    if (k == name) return t;
  }
  throw DomainError("checkpoint: missing tensor '" + name + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("checkpoint: cannot write '" + path + "'");
  out << "DSCKPT 1\n";
  char num[64];
  for (const auto& [k, v] : c.meta) {
    std::snprintf(num, sizeof num, "%.17g", v);
    out << "meta " << k << ' ' << num << '\n';
  }
  for (const auto& [name, t] : c.tensors) {
    out << "tensor " << name << ' ' << t.ndim();
    for (std::size_t d : t.shape()) out << ' ' << d;
    out << '\n';
  }
  out << "END\n";
  for (const auto& [name, t] : c.tensors) {
    const auto& v = t.data();
    out.write(reinterpret_cast<const char*>(v.data()),
              std::streamsize(v.size() * sizeof(double)));
  }
  if (!out) throw DomainError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("checkpoint: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "DSCKPT 1") {
    throw DomainError("checkpoint: '" + path + "' is not a DSCKPT 1 file");
  }
  Checkpoint c;
  std::vector<std::pair<std::string, Shape>> pending;
  while (std::getline(in, line)) {
    if (line == "END") break;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      double value = 0.0;
      if (!(ls >> key >> value)) {
        throw DomainError("checkpoint: bad meta line '" + line + "'");
      }
      c.meta.emplace_back(key, value);
    } else if (kind == "tensor") {
      std::string name;
      std::size_t rank = 0;
      if (!(ls >> name >> rank)) {
        throw DomainError("checkpoint: bad tensor line '" + line + "'");
      }
      Shape shape(rank);
      for (std::size_t i = 0; i < rank; ++i) {
        if (!(ls >> shape[i])) {
          throw DomainError("checkpoint: bad tensor line '" + line + "'");
        }
      }
      pending.emplace_back(name, std::move(shape));
    } else {
      throw DomainError("checkpoint: unexpected header line '" + line + "'");
    }
  }
  if (line != "END") throw DomainError("checkpoint: missing END marker");
  for (auto& [name, shape] : pending) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> values(n);
    in.read(reinterpret_cast<char*>(values.data()),
            std::streamsize(n * sizeof(double)));
    if (std::size_t(in.gcount()) != n * sizeof(double)) {
      throw DomainError("checkpoint: truncated payload in '" + path + "'");
    }
    c.tensors.emplace_back(name,
                           Tensor::from_data(std::move(shape),
                                             std::move(values)));
  }
  if (in.get() != std::ifstream::traits_type::eof()) {
    throw DomainError("checkpoint: trailing bytes in '" + path + "'");
  }
  return c;
}

}  // namespace deshadow

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "occfit/common.hpp"
#include "occfit/field.hpp"

namespace occfit {

struct AdamWConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  size_t total_steps = 0;

  void validate() const {
    if (!(lr0 > 0)) throw ConfigError("optim.lr0 must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw ConfigError("optim betas must be in [0, 1)");
    if (!(weight_decay >= 0))
      throw ConfigError("optim.weight_decay must be >= 0");
  }
};

// Contiguous parameter range with shared update policy. `decay` applies the
// decoupled weight decay; `clamp01` pins the range to [0, 1] after the step.
struct ParamBlock {
  std::string name;
  size_t begin = 0;
  size_t end = 0;
  bool decay = true;
  bool clamp01 = false;
};

// Sharpness and background color are excluded from decay: shrinking rho would
// drag the sigmoid scale toward 1 regardless of the data.
inline std::vector<ParamBlock> param_blocks(const SdfField<double>& f) {
  size_t n = f.spec.cells();
  std::vector<ParamBlock> b;
  b.push_back({"sdf", 0, n, true, false});
  b.push_back({"color", n, 4 * n, true, true});
  if (f.sem_channels > 0)
    b.push_back({"semantic", 4 * n, (4 + size_t(f.sem_channels)) * n, true,
                 false});
  b.push_back({"rho", f.rho_off(), f.rho_off() + 1, false, false});
  b.push_back({"background", f.bg_off(), f.bg_off() + 3, false, true});
  return b;
}

inline std::vector<ParamBlock> param_blocks(const TpvField<double>& f) {
  std::vector<ParamBlock> b;
  b.push_back({"planes", 0, f.w1_off(), true, false});
  b.push_back({"decoder", f.w1_off(), f.rho_off(), true, false});
  b.push_back({"rho", f.rho_off(), f.rho_off() + 1, false, false});
  b.push_back({"background", f.bg_off(), f.bg_off() + 3, false, true});
  return b;
}

inline std::vector<ParamBlock> param_blocks(const AnyField<double>& f) {
  return std::visit([](const auto& g) { return param_blocks(g); }, f);
}

// Cosine decay from lr0 at step 0 to zero at total_steps.
inline double cosine_lr(double lr0, size_t step, size_t total_steps) {
  if (total_steps == 0) throw DomainError("cosine_lr: total_steps is zero");
  return lr0 * 0.5 * (1.0 + std::cos(kPi * double(step) / double(total_steps)));
}

// Decoupled-weight-decay adaptive optimizer over a flat parameter vector.
class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig cfg, std::vector<ParamBlock> blocks, size_t param_count)
      : cfg_(cfg), blocks_(std::move(blocks)), m_(param_count, 0.0),
        v_(param_count, 0.0) {
    cfg_.validate();
    for (const ParamBlock& b : blocks_) {
      if (b.begin > b.end || b.end > param_count)
        throw DomainError("AdamW: block range outside parameter vector");
    }
  }

  double learning_rate() const { return cosine_lr(cfg_.lr0, step_, cfg_.total_steps); }
  size_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

  void step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw DomainError("AdamW: parameter/gradient size mismatch");
    double lr = learning_rate();
    double t = double(step_ + 1);
    double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (const ParamBlock& b : blocks_) {
      double wd = b.decay ? cfg_.weight_decay : 0.0;
      for (size_t i = b.begin; i < b.end; ++i) {
        double g = grads[i];
        if (std::isnan(g))
          throw NumericError("NaN gradient in parameter block " + b.name);
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
        double mhat = m_[i] / bc1;
        double vhat = v_[i] / bc2;
        params[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * params[i]);
      }
      if (b.clamp01) {
        for (size_t i = b.begin; i < b.end; ++i) params[i] = clamp01(params[i]);
      }
    }
    ++step_;
  }

  // Binary state image used by checkpoint sidecars; the block table is
  // reconstructed from the field, so only the accumulators travel.
  void save(std::ostream& out) const {
    out.write("SOPT", 4);
    uint32_t version = 1;
    uint64_t step = step_, count = m_.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&step), sizeof step);
    out.write(reinterpret_cast<const char*>(&count), sizeof count);
    out.write(reinterpret_cast<const char*>(m_.data()),
              std::streamsize(m_.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(v_.data()),
              std::streamsize(v_.size() * sizeof(double)));
    if (!out) throw StructuralError("optimizer state write failed");
  }

  void load(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "SOPT")
      throw ParseError("bad optimizer state magic", 0);
    uint32_t version = 0;
    uint64_t step = 0, count = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&step), sizeof step);
    in.read(reinterpret_cast<char*>(&count), sizeof count);
    if (!in || version != 1)
      throw ParseError("unsupported optimizer state version", 4);
    if (count != m_.size())
      throw StructuralError("optimizer state size does not match field");
    step_ = size_t(step);
    in.read(reinterpret_cast<char*>(m_.data()),
            std::streamsize(m_.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(v_.data()),
            std::streamsize(v_.size() * sizeof(double)));
    if (!in) throw ParseError("truncated optimizer state", 24);
  }

 private:
  AdamWConfig cfg_;
  std::vector<ParamBlock> blocks_;
  std::vector<double> m_, v_;
  size_t step_ = 0;
};

}  // namespace occfit

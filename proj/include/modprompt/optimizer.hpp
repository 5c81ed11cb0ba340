#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "modprompt/params.hpp"

namespace modprompt {

// AdamW: adaptive moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamDict& params, const std::vector<std::string>& trainable) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& key : trainable) {
      Var& p = params.at(key);
      if (p->grad.v.empty()) p->grad = Tensor(p->val.shape);
      Tensor& m = moment1_.try_emplace(key, Tensor(p->val.shape)).first->second;
      Tensor& v = moment2_.try_emplace(key, Tensor(p->val.shape)).first->second;
      for (std::int64_t i = 0; i < p->val.size(); ++i) {
        double g = p->grad.at(i);
        m.at(i) = beta1_ * m.at(i) + (1.0 - beta1_) * g;
        v.at(i) = beta2_ * v.at(i) + (1.0 - beta2_) * g * g;
        double mh = m.at(i) / bc1;
        double vh = v.at(i) / bc2;
        p->val.at(i) -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * p->val.at(i));
      }
    }
  }

  int step_count() const { return t_; }
  const std::map<std::string, Tensor>& moment1() const { return moment1_; }
  const std::map<std::string, Tensor>& moment2() const { return moment2_; }

  void restore(int step_count, std::map<std::string, Tensor> m1,
               std::map<std::string, Tensor> m2) {
    t_ = step_count;
    moment1_ = std::move(m1);
    moment2_ = std::move(m2);
  }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::map<std::string, Tensor> moment1_, moment2_;
};

}  // namespace modprompt

#include "qualirt/parameters.hpp"

#include <cmath>
#include <string>

#include "qualirt/errors.hpp"

namespace qualirt {

namespace {

// Walks free parameters in layout order. `get` mode copies model -> values,
// otherwise values -> model. Names are collected when `names` is non-null.
class Walker {
 public:
  Walker(ModelSpec& model, Eigen::VectorXd& values, bool get, std::vector<std::string>* names)
      : model_(model), values_(values), get_(get), names_(names) {}

  void run() {
    items();
    latent();
    structural();
    if (!get_ && pos_ != values_.size()) {
      throw ModelError("parameter vector has " + std::to_string(values_.size()) +
                       " entries, model has " + std::to_string(pos_) + " free parameters");
    }
    if (get_) values_.conservativeResize(pos_);
  }

 private:
  void visit(double& x, const std::string& name) {
    if (get_) {
      if (pos_ >= values_.size()) values_.conservativeResize(std::max<Eigen::Index>(16, 2 * pos_ + 1));
      values_(pos_) = x;
    } else {
      if (pos_ >= values_.size()) throw ModelError("parameter vector too short");
      x = values_(pos_);
    }
    if (names_ != nullptr) names_->push_back(name);
    ++pos_;
  }

  void items() {
    for (int i = 0; i < model_.n_items(); ++i) {
      if (model_.item_excluded(i)) continue;
      auto& p = model_.params[i];
      const std::string base = "item:" + model_.items[i].id + ":";
      const bool multi_row = p.slopes.rows() > 1;
      for (Eigen::Index r = 0; r < p.slopes.rows(); ++r) {
        for (Eigen::Index s = 0; s < p.slopes.cols(); ++s) {
          if (p.slope_fixed(r, s)) continue;
          std::string name = base + "a";
          if (multi_row) name += "[" + std::to_string(r) + "]";
          if (p.slopes.cols() > 1) name += std::to_string(s + 1);
          visit(p.slopes(r, s), name);
        }
      }
      for (Eigen::Index k = 0; k < p.intercepts.size(); ++k) {
        if (p.intercept_fixed(k)) continue;
        std::string name = base + "d";
        if (p.kind == ItemKind::nominal) {
          name += "[" + std::to_string(k) + "]";
        } else if (p.intercepts.size() > 1) {
          name += std::to_string(k + 1);
        }
        visit(p.intercepts(k), name);
      }
    }
  }

  void latent() {
    if (auto* n = std::get_if<NormalLatent>(&model_.latent)) {
      if (n->mean_free) {
        for (Eigen::Index s = 0; s < n->mean.size(); ++s) visit(n->mean(s), "mean" + std::to_string(s + 1));
      }
      if (n->cov_free) {
        for (Eigen::Index c = 0; c < n->cov.cols(); ++c) {
          for (Eigen::Index r = c; r < n->cov.rows(); ++r) {
            visit(n->cov(r, c), "cov" + std::to_string(r + 1) + std::to_string(c + 1));
            n->cov(c, r) = n->cov(r, c);
          }
        }
      }
      return;
    }
    auto& d = std::get<DiscreteLatent>(model_.latent);
    if (d.support_free) {
      for (Eigen::Index c = 0; c < d.support.rows(); ++c) {
        for (Eigen::Index s = 0; s < d.support.cols(); ++s) {
          std::string name = "xi" + std::to_string(c + 1);
          if (d.support.cols() > 1) name += "_" + std::to_string(s + 1);
          visit(d.support(c, s), name);
        }
      }
    }
    const bool class_structural =
        model_.structural && !std::holds_alternative<LatentRegression>(*model_.structural);
    if (class_structural || d.support.rows() < 2) return;
    const Eigen::Index classes = d.support.rows();
    Eigen::VectorXd logits(classes);
    logits(0) = 0.0;
    for (Eigen::Index c = 1; c < classes; ++c) {
      double v = get_ ? std::log(d.prior(c)) - std::log(d.prior(0)) : 0.0;
      visit(v, "prior_logit" + std::to_string(c + 1));
      logits(c) = v;
    }
    if (!get_) {
      const double top = logits.maxCoeff();
      Eigen::VectorXd e = (logits.array() - top).exp();
      d.prior = e / e.sum();
    }
  }

  void structural() {
    if (!model_.structural) return;
    std::visit(
        [&](auto& s) {
          using T = std::decay_t<decltype(s)>;
          auto cov_name = [&](Eigen::Index r) {
            return r < static_cast<Eigen::Index>(s.covariate_names.size()) ? s.covariate_names[r]
                                                                          : "w" + std::to_string(r + 1);
          };
          if constexpr (std::is_same_v<T, LatentRegression>) {
            for (Eigen::Index r = 0; r < s.gamma.rows(); ++r) {
              for (Eigen::Index c = 0; c < s.gamma.cols(); ++c) {
                visit(s.gamma(r, c), "gamma:" + cov_name(r) + ":trait" + std::to_string(c + 1));
              }
            }
          } else if constexpr (std::is_same_v<T, MultinomialLogit>) {
            for (Eigen::Index c = 0; c < s.gamma.cols(); ++c) {
              for (Eigen::Index r = 0; r < s.gamma.rows(); ++r) {
                visit(s.gamma(r, c), "gamma:" + cov_name(r) + ":class" + std::to_string(c + 2));
              }
            }
          } else {
            for (Eigen::Index c = 0; c < s.cutpoints.size(); ++c) {
              visit(s.cutpoints(c), "cut" + std::to_string(c + 1));
            }
            for (Eigen::Index r = 0; r < s.gamma.size(); ++r) visit(s.gamma(r), "gamma:" + cov_name(r));
          }
        },
        *model_.structural);
  }

  ModelSpec& model_;
  Eigen::VectorXd& values_;
  bool get_;
  std::vector<std::string>* names_;
  Eigen::Index pos_ = 0;
};

}  // namespace

Eigen::VectorXd pack_free(const ModelSpec& model) {
  ModelSpec copy = model;
  Eigen::VectorXd values;
  Walker(copy, values, true, nullptr).run();
  return values;
}

void unpack_free(const Eigen::VectorXd& values, ModelSpec& model) {
  Eigen::VectorXd v = values;
  Walker(model, v, false, nullptr).run();
}

std::vector<std::string> free_parameter_names(const ModelSpec& model) {
  ModelSpec copy = model;
  Eigen::VectorXd values;
  std::vector<std::string> names;
  Walker(copy, values, true, &names).run();
  return names;
}

int count_free(const ModelSpec& model) { return static_cast<int>(pack_free(model).size()); }

}  // namespace qualirt

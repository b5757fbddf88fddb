#include "sfuida/optim.hpp"

#include <cmath>

namespace sfuida::optim {

Adam::Adam(model::SscModel& model, std::vector<model::Parameter*> params, AdamOptions options)
    : model_(&model), params_(std::move(params)), options_(options) {
  for (const auto* p : params_) {
    m_.push_back(model::Matrix::Zero(p->var.rows(), p->var.cols()));
    v_.push_back(model::Matrix::Zero(p->var.rows(), p->var.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& var = params_[i]->var;
    if (!var.has_grad()) continue;
    model::Matrix g = var.grad();
    if (options_.weight_decay != 0.0) g += options_.weight_decay * var.value();
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    if (options_.lr == 0.0) continue;
    var.mutable_value().array() -=
        options_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + options_.eps);
  }
  model_->note_optimizer_step();
}

void Adam::zero_grad() {
  for (auto* p : params_) p->var.zero_grad();
}

AdamOptions adam_options(const Hyperparameters& h, double lr) {
  AdamOptions o;
  o.lr = lr;
  o.beta1 = h.adam_betas.first;
  o.beta2 = h.adam_betas.second;
  o.weight_decay = h.weight_decay;
  return o;
}

}  // namespace sfuida::optim

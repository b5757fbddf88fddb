#pragma once

#include <vector>

#include "sfuida/model.hpp"

namespace sfuida::optim {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient
};

// Adam with L2-coupled weight decay. Parameters without an accumulated
// gradient are skipped, so a frozen or unused block is left untouched.
class Adam {
 public:
  Adam(model::SscModel& model, std::vector<model::Parameter*> params, AdamOptions options);

  void step();
  void zero_grad();
  const AdamOptions& options() const { return options_; }
  long steps() const { return t_; }

 private:
  model::SscModel* model_;
  std::vector<model::Parameter*> params_;
  std::vector<model::Matrix> m_;
  std::vector<model::Matrix> v_;
  AdamOptions options_;
  long t_ = 0;
};

AdamOptions adam_options(const Hyperparameters& h, double lr);

}  // namespace sfuida::optim

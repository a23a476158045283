#pragma once

#include "mgml/backbone.hpp"
#include "mgml/ops.hpp"

namespace mgml {

/// Full-modality fused logits with parameters bound as constants, so the
/// result carries no tape attachment.
template <std::floating_point T>
Tensor<T> teacher_forward(const Backbone<T>& model, const std::vector<Tensor<T>>& volumes) {
  Binder<T> constants;
  const auto full = ModalitySet::full(model.config().modalities);
  return model.forward(constants, volumes, full).fused.detach();
}

/// L_CR = mean over voxels of KL(softmax(Y_t/τ) ‖ softmax(Y_s/τ)); the teacher
/// side is detached.
template <std::floating_point T>
Tensor<T> consistency_loss(const Tensor<T>& student, const Tensor<T>& teacher, T tau) {
  if (student.shape() != teacher.shape()) {
    throw ShapeError("consistency_loss: shape mismatch " + shape_str(student.shape()) + " vs " +
                     shape_str(teacher.shape()));
  }
  return ops::reduce_mean(ops::kl_div(teacher.detach(), student, 0, tau));
}

}  // namespace mgml

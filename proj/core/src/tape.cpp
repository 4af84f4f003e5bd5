#include "stockformer/tape.hpp"

#include "stockformer/errors.hpp"

namespace stockformer {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar tensor");
  }
  if (nodes_.empty()) {
    throw ShapeError("backward: tape is empty");
  }
  if (consumed_) {
    throw ShapeError("backward: tape already consumed; call clear() first");
  }
  auto loss_impl = loss.impl();
  loss_impl->ensure_grad();
  loss_impl->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on any path to the loss
    it->backprop(*it->output);
  }
  consumed_ = true;
}

void Tape::clear() {
  nodes_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

}  // namespace stockformer

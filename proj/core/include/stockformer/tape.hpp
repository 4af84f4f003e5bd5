#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "stockformer/tensor.hpp"

namespace stockformer {

namespace detail {

struct TapeNode {
  const char* op;
  std::shared_ptr<TensorImpl> output;
  // Reads output->grad, accumulates into the captured inputs' grads.
  std::function<void(const TensorImpl& out)> backprop;
};

}  // namespace detail

// Ordered record of executed primitive ops. Ops append nodes while a tape
// is active on the current thread; backward() replays them once in reverse.
// Single-threaded per tape; independent tapes may live on other threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Reverse sweep from a scalar loss. Each node is visited exactly once;
  /// the tape is then consumed until clear() is called.
  void backward(const Tensor& loss);

  void clear();

  /// Tape currently recording on this thread, or nullptr.
  static Tape* active();

  void record(detail::TapeNode node) { nodes_.push_back(std::move(node)); }

 private:
  friend class TapeScope;
  std::vector<detail::TapeNode> nodes_;
  bool consumed_ = false;
};

/// RAII activation of a tape on the current thread (nestable).
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace stockformer

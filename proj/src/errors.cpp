#include "promptlab/errors.hpp"

#include <sstream>

namespace promptlab {

namespace {
std::string abort_message(std::size_t step, double learning_rate) {
  std::ostringstream out;
  out << "training aborted: non-finite loss at step " << step
      << " (learning rate " << learning_rate << ")";
  return out.str();
}
}  // namespace

TrainAbort::TrainAbort(std::size_t step_, double learning_rate_)
    : std::runtime_error(abort_message(step_, learning_rate_)),
      step(step_),
      learning_rate(learning_rate_) {}

}  // namespace promptlab

#include "flowdistill/policy.hpp"

#include "flowdistill/distill.hpp"

namespace fd {

std::string TeacherPolicy::name() const {
  return "teacher-" + integrator_name(sampler_.integrator) + "-" + std::to_string(sampler_.steps);
}

TensorF StudentPolicy::sample(std::span<const float> e_obs, std::size_t k, std::uint64_t seed) {
  return student_sample_set(net_, e_obs, k, seed);
}

}  // namespace fd

#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "flowdistill/cfm.hpp"

namespace fd {

// Anything that maps an observation embedding to trajectory samples.
class Policy {
 public:
  virtual ~Policy() = default;

  virtual std::string name() const = 0;
  // K samples for one embedding, (K, H, D) in task units. Sample k depends
  // only on (seed, k).
  virtual TensorF sample(std::span<const float> e_obs, std::size_t k, std::uint64_t seed) = 0;
  // Network evaluations so far, counted per trajectory.
  virtual std::uint64_t nfe() const = 0;
  virtual void reset_nfe() = 0;
};

class TeacherPolicy : public Policy {
 public:
  TeacherPolicy(TeacherNet<float>& net, OdeSamplerConfig sampler, double eps = 1e-3)
      : net_(net), sampler_(sampler), eps_(eps) {}

  std::string name() const override;
  TensorF sample(std::span<const float> e_obs, std::size_t k, std::uint64_t seed) override {
    return generate_teacher_set(net_, e_obs, k, sampler_, seed, eps_);
  }
  std::uint64_t nfe() const override { return net_.nfe(); }
  void reset_nfe() override { net_.reset_nfe(); }
  const OdeSamplerConfig& sampler() const { return sampler_; }

 private:
  TeacherNet<float>& net_;
  OdeSamplerConfig sampler_;
  double eps_;
};

class StudentPolicy : public Policy {
 public:
  explicit StudentPolicy(StudentNet<float>& net) : net_(net) {}

  std::string name() const override { return "student"; }
  TensorF sample(std::span<const float> e_obs, std::size_t k, std::uint64_t seed) override;
  std::uint64_t nfe() const override { return net_.nfe(); }
  void reset_nfe() override { net_.reset_nfe(); }

 private:
  StudentNet<float>& net_;
};

}  // namespace fd

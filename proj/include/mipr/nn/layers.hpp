#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mipr/nn/autograd.hpp"
#include "mipr/rng.hpp"

namespace mipr::nn {

/// Flat name -> tensor mapping holding parameters and buffers.
using StateDict = std::map<std::string, Tensor>;

/// Base for parameterized blocks. Children register themselves by pointer,
/// so modules are neither copyable nor movable. Mode flags are passed to
/// forward calls rather than stored, so a frozen model can serve concurrent
/// inference.
class Module {
public:
    Module() = default;
    virtual ~Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    std::vector<std::pair<std::string, Var>> named_parameters() const;
    std::vector<Var> parameters() const;
    std::size_t parameter_count() const;

    StateDict state_dict() const;
    /// Strict: every entry must exist with a matching shape.
    void load_state_dict(const StateDict& state);

    void zero_grad();

protected:
    Var& register_parameter(const std::string& name, Tensor value);
    Tensor& register_buffer(const std::string& name, Tensor value);
    void register_module(const std::string& name, Module& child);

private:
    void collect(const std::string& prefix, std::vector<std::pair<std::string, Var>>& params,
                 std::vector<std::pair<std::string, Tensor*>>& buffers) const;

    // std::map keeps node addresses stable.
    std::map<std::string, Var> params_;
    std::map<std::string, Tensor> buffers_;
    std::vector<std::pair<std::string, Module*>> children_;
};

/// He-normal initialized convolution with optional bias.
class Conv2d : public Module {
public:
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng,
           bool bias = true);

    Var forward(const Var& x) const;
    Var& weight() { return weight_; }
    Var& bias() { return bias_; }
    const Var& weight() const { return weight_; }
    const Var& bias() const { return bias_; }
    int stride() const { return stride_; }
    int padding() const { return padding_; }

private:
    Var& weight_;
    Var bias_;
    int stride_;
    int padding_;
};

class BatchNorm2d : public Module {
public:
    explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);
    /// Training mode normalizes with batch statistics and updates the running ones.
    Var forward(const Var& x, bool training) const;

private:
    Var& gamma_;
    Var& beta_;
    Tensor& running_mean_;
    Tensor& running_var_;
    double momentum_;
    double eps_;
};

/// Adam with decoupled per-parameter moment buffers.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(std::vector<Var> params, Options options);

    void step();
    void zero_grad();
    void set_lr(double lr) { options_.lr = lr; }
    double lr() const { return options_.lr; }
    std::int64_t steps() const { return step_; }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    Options options_;
    std::int64_t step_ = 0;
};

/// lr(epoch) = base * (1 + cos(pi * epoch / epochs)) / 2, epoch counted from 0.
double cosine_annealing(double base_lr, int epoch, int epochs);

/// Binary tensor blob: "MIPRTNS1", count, then (name, shape, float64 data)*.
void write_state(std::ostream& out, const StateDict& state);
StateDict read_state(std::istream& in);

}  // namespace mipr::nn

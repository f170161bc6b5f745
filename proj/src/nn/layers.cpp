#include "mipr/nn/layers.hpp"

#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>

#include "mipr/error.hpp"

namespace mipr::nn {

Var& Module::register_parameter(const std::string& name, Tensor value) {
    auto [it, inserted] = params_.emplace(name, Var(std::move(value), true));
    require(inserted, ErrorKind::Invalid, "duplicate parameter " + name);
    return it->second;
}

Tensor& Module::register_buffer(const std::string& name, Tensor value) {
    auto [it, inserted] = buffers_.emplace(name, std::move(value));
    require(inserted, ErrorKind::Invalid, "duplicate buffer " + name);
    return it->second;
}

void Module::register_module(const std::string& name, Module& child) {
    children_.emplace_back(name, &child);
}

void Module::collect(const std::string& prefix, std::vector<std::pair<std::string, Var>>& params,
                     std::vector<std::pair<std::string, Tensor*>>& buffers) const {
    for (const auto& [name, var] : params_) params.emplace_back(prefix + name, var);
    for (const auto& [name, tensor] : buffers_)
        buffers.emplace_back(prefix + name, const_cast<Tensor*>(&tensor));
    for (const auto& [name, child] : children_) child->collect(prefix + name + ".", params, buffers);
}

std::vector<std::pair<std::string, Var>> Module::named_parameters() const {
    std::vector<std::pair<std::string, Var>> params;
    std::vector<std::pair<std::string, Tensor*>> buffers;
    collect("", params, buffers);
    return params;
}

std::vector<Var> Module::parameters() const {
    std::vector<Var> out;
    for (auto& [name, var] : named_parameters()) out.push_back(var);
    return out;
}

std::size_t Module::parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, var] : named_parameters()) n += var.value().size();
    return n;
}

StateDict Module::state_dict() const {
    std::vector<std::pair<std::string, Var>> params;
    std::vector<std::pair<std::string, Tensor*>> buffers;
    collect("", params, buffers);
    StateDict state;
    for (auto& [name, var] : params) state[name] = var.value();
    for (auto& [name, tensor] : buffers) state[name] = *tensor;
    return state;
}

void Module::load_state_dict(const StateDict& state) {
    std::vector<std::pair<std::string, Var>> params;
    std::vector<std::pair<std::string, Tensor*>> buffers;
    collect("", params, buffers);
    require(state.size() == params.size() + buffers.size(), ErrorKind::Data,
            "state dict has " + std::to_string(state.size()) + " entries, module expects " +
                std::to_string(params.size() + buffers.size()));
    auto assign = [&](const std::string& name, Tensor& dst) {
        auto it = state.find(name);
        require(it != state.end(), ErrorKind::Data, "state dict missing entry " + name);
        require(it->second.shape() == dst.shape(), ErrorKind::Data,
                "state dict entry " + name + " has shape " + it->second.shape().str() +
                    ", expected " + dst.shape().str());
        dst = it->second;
    };
    for (auto& [name, var] : params) assign(name, var.mutable_value());
    for (auto& [name, tensor] : buffers) assign(name, *tensor);
}

void Module::zero_grad() {
    for (auto& [name, var] : named_parameters()) var.zero_grad();
}

namespace {

Tensor he_normal(Shape shape, Rng& rng) {
    const double fan_in = static_cast<double>(shape.c) * shape.h * shape.w;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    Tensor t(shape);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

}  // namespace

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng,
               bool bias)
    : weight_(register_parameter("weight", he_normal(Shape{out_channels, in_channels, kernel, kernel}, rng))),
      stride_(stride),
      padding_(padding) {
    if (bias) bias_ = register_parameter("bias", Tensor(Shape{1, out_channels, 1, 1}));
}

Var Conv2d::forward(const Var& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : gamma_(register_parameter("gamma", Tensor(Shape{1, channels, 1, 1}, 1.0))),
      beta_(register_parameter("beta", Tensor(Shape{1, channels, 1, 1}))),
      running_mean_(register_buffer("running_mean", Tensor(Shape{1, channels, 1, 1}))),
      running_var_(register_buffer("running_var", Tensor(Shape{1, channels, 1, 1}, 1.0))),
      momentum_(momentum),
      eps_(eps) {}

Var BatchNorm2d::forward(const Var& x, bool training) const {
    return batch_norm(x, gamma_, beta_, running_mean_, running_var_, training, momentum_, eps_);
}

Adam::Adam(std::vector<Var> params, Options options) : params_(std::move(params)), options_(options) {
    for (const Var& p : params_) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
    }
}

void Adam::step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const Tensor& g = params_[k].grad();
        if (g.empty()) continue;
        Tensor& w = params_[k].mutable_value();
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = options_.beta1 * m[i] + (1 - options_.beta1) * g[i];
            v[i] = options_.beta2 * v[i] + (1 - options_.beta2) * g[i] * g[i];
            const double mhat = bc1 > 0 ? m[i] / bc1 : m[i];
            w[i] -= options_.lr * mhat / (std::sqrt(v[i] / bc2) + options_.eps);
        }
    }
}

void Adam::zero_grad() {
    for (Var& p : params_) p.zero_grad();
}

double cosine_annealing(double base_lr, int epoch, int epochs) {
    return base_lr * (1.0 + std::cos(std::numbers::pi * epoch / epochs)) / 2.0;
}

namespace {

constexpr char kStateMagic[8] = {'M', 'I', 'P', 'R', 'T', 'N', 'S', '1'};

template <typename T>
void put(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    require(static_cast<bool>(in), ErrorKind::Data, "truncated tensor blob");
    return value;
}

}  // namespace

void write_state(std::ostream& out, const StateDict& state) {
    out.write(kStateMagic, sizeof(kStateMagic));
    put<std::uint64_t>(out, state.size());
    for (const auto& [name, tensor] : state) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Shape& s = tensor.shape();
        for (int d : {s.n, s.c, s.h, s.w}) put<std::int32_t>(out, d);
        out.write(reinterpret_cast<const char*>(tensor.data()),
                  static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    }
    require(static_cast<bool>(out), ErrorKind::Io, "failed to write tensor blob");
}

StateDict read_state(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof(magic));
    require(in && std::equal(magic, magic + 8, kStateMagic), ErrorKind::Data, "bad tensor blob header");
    const auto count = get<std::uint64_t>(in);
    StateDict state;
    for (std::uint64_t k = 0; k < count; ++k) {
        const auto len = get<std::uint32_t>(in);
        require(len < 4096, ErrorKind::Data, "corrupt tensor name length");
        std::string name(len, '\0');
        in.read(name.data(), len);
        Shape s{get<std::int32_t>(in), get<std::int32_t>(in), get<std::int32_t>(in), get<std::int32_t>(in)};
        require(s.n >= 0 && s.c >= 0 && s.h >= 0 && s.w >= 0 && s.numel() < (1ULL << 32), ErrorKind::Data,
                "corrupt shape for tensor " + name);
        Tensor t(s);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        require(static_cast<bool>(in), ErrorKind::Data, "truncated data for tensor " + name);
        state.emplace(std::move(name), std::move(t));
    }
    return state;
}

}  // namespace mipr::nn

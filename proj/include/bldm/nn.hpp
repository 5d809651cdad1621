#pragma once

// Layers, parameter registry, Adam, and binary weight blobs.

#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "bldm/autograd.hpp"
#include "bldm/rng.hpp"

namespace bldm::nn {

template <class T>
using Var = ag::Var<T>;

// Ordered (name, parameter) list. Order is the serialization order.
template <class T>
class ParamList {
public:
    void add(std::string name, Var<T>& v) { items_.push_back({std::move(name), &v}); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    std::size_t size() const { return items_.size(); }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto& [_, v] : items_) n += v->value().numel();
        return n;
    }
    void zero_grad() {
        for (auto& [_, v] : items_) v->zero_grad();
    }

private:
    std::vector<std::pair<std::string, Var<T>*>> items_;
};

template <class T>
Tensor<T> kaiming_uniform(Shape shape, int fan_in, Rng& rng, T gain = T(1)) {
    Tensor<T> t(std::move(shape));
    const double bound = gain * std::sqrt(3.0 / std::max(fan_in, 1));
    for (auto& v : t.data) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    return t;
}

template <class T>
struct Conv3d {
    Var<T> weight, bias;
    int stride = 1;

    Conv3d() = default;
    Conv3d(int cin, int cout, std::array<int, 3> k, int stride_, Rng& rng, T gain = T(1)) : stride(stride_) {
        const int fan_in = cin * k[0] * k[1] * k[2];
        weight = ag::parameter(kaiming_uniform<T>({cout, cin, k[0], k[1], k[2]}, fan_in, rng, gain));
        bias = ag::parameter(Tensor<T>({cout}));
    }
    Conv3d(int cin, int cout, int k, int stride_, Rng& rng, T gain = T(1))
        : Conv3d(cin, cout, {k, k, k}, stride_, rng, gain) {}

    Var<T> operator()(const Var<T>& x) const { return ag::conv3d(x, weight, bias, stride); }
    void collect(const std::string& prefix, ParamList<T>& ps) {
        ps.add(prefix + ".weight", weight);
        ps.add(prefix + ".bias", bias);
    }
    int out_channels() const { return weight.value().dim(0); }
};

template <class T>
struct Linear {
    Var<T> weight, bias;

    Linear() = default;
    Linear(int in, int out, Rng& rng, T gain = T(1)) {
        weight = ag::parameter(kaiming_uniform<T>({out, in}, in, rng, gain));
        bias = ag::parameter(Tensor<T>({out}));
    }
    Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, bias); }
    void collect(const std::string& prefix, ParamList<T>& ps) {
        ps.add(prefix + ".weight", weight);
        ps.add(prefix + ".bias", bias);
    }
};

template <class T>
struct GroupNorm {
    Var<T> gamma, beta;
    int groups = 1;

    GroupNorm() = default;
    GroupNorm(int channels, int groups_) : groups(groups_) {
        while (channels % groups != 0) --groups;
        gamma = ag::parameter(Tensor<T>({channels}, T(1)));
        beta = ag::parameter(Tensor<T>({channels}));
    }
    Var<T> operator()(const Var<T>& x) const { return ag::group_norm(x, gamma, beta, groups); }
    void collect(const std::string& prefix, ParamList<T>& ps) {
        ps.add(prefix + ".gamma", gamma);
        ps.add(prefix + ".beta", beta);
    }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // global-norm clip; 0 disables
};

template <class T>
class Adam {
public:
    Adam(ParamList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto& [name, v] : params_) {
            m_.emplace_back(v->shape());
            v_.emplace_back(v->shape());
        }
    }

    void zero_grad() { params_.zero_grad(); }

    void step() {
        ++t_;
        double scale = 1.0;
        if (cfg_.grad_clip > 0) {
            double sq = 0;
            for (auto& [_, p] : params_)
                if (p->has_grad())
                    for (T g : p->grad().data) sq += double(g) * g;
            const double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
        }
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        std::size_t i = 0;
        for (auto& [_, p] : params_) {
            auto& m = m_[i];
            auto& v = v_[i];
            ++i;
            if (!p->has_grad()) continue;
            auto& g = p->grad().data;
            auto& w = p->mutable_value().data;
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = g[k] * scale;
                m.data[k] = static_cast<T>(cfg_.beta1 * m.data[k] + (1 - cfg_.beta1) * gk);
                v.data[k] = static_cast<T>(cfg_.beta2 * v.data[k] + (1 - cfg_.beta2) * gk * gk);
                const double mh = m.data[k] / bc1, vh = v.data[k] / bc2;
                w[k] = static_cast<T>(w[k] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    long steps() const { return t_; }

    // Moment estimates and step count, for exact resumption.
    void save_state(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write optimizer state to " + path);
        const std::int64_t t = t_;
        os.write(reinterpret_cast<const char*>(&t), sizeof t);
        for (std::size_t i = 0; i < m_.size(); ++i) {
            os.write(reinterpret_cast<const char*>(m_[i].ptr()), static_cast<std::streamsize>(m_[i].numel() * sizeof(T)));
            os.write(reinterpret_cast<const char*>(v_[i].ptr()), static_cast<std::streamsize>(v_[i].numel() * sizeof(T)));
        }
    }

    void load_state(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot read optimizer state from " + path);
        std::int64_t t = 0;
        is.read(reinterpret_cast<char*>(&t), sizeof t);
        for (std::size_t i = 0; i < m_.size(); ++i) {
            is.read(reinterpret_cast<char*>(m_[i].ptr()), static_cast<std::streamsize>(m_[i].numel() * sizeof(T)));
            is.read(reinterpret_cast<char*>(v_[i].ptr()), static_cast<std::streamsize>(v_[i].numel() * sizeof(T)));
        }
        if (!is) throw std::runtime_error(path + ": optimizer state truncated or mismatched");
        t_ = static_cast<long>(t);
    }

private:
    ParamList<T> params_;
    AdamConfig cfg_;
    std::vector<Tensor<T>> m_, v_;
    long t_ = 0;
};

// Weight blob: "BLDMW1\0\0", u64 count, then per tensor:
// u32 name length, name bytes, u32 ndim, i32 dims[ndim], float32 data.
template <class T>
void save_params(const ParamList<T>& ps, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write weights to " + path);
    const char magic[8] = {'B', 'L', 'D', 'M', 'W', '1', 0, 0};
    os.write(magic, 8);
    const std::uint64_t n = ps.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof n);
    for (const auto& [name, v] : ps) {
        const std::uint32_t len = static_cast<std::uint32_t>(name.size());
        os.write(reinterpret_cast<const char*>(&len), sizeof len);
        os.write(name.data(), len);
        const std::uint32_t nd = static_cast<std::uint32_t>(v->shape().size());
        os.write(reinterpret_cast<const char*>(&nd), sizeof nd);
        for (int d : v->shape()) {
            const std::int32_t d32 = d;
            os.write(reinterpret_cast<const char*>(&d32), sizeof d32);
        }
        for (T x : v->value().data) {
            const float f = static_cast<float>(x);
            os.write(reinterpret_cast<const char*>(&f), sizeof f);
        }
    }
    if (!os) throw std::runtime_error("short write to " + path);
}

template <class T>
void load_params(ParamList<T>& ps, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read weights from " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "BLDMW1", 6) != 0) throw std::runtime_error(path + ": not a weight blob");
    std::uint64_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof n);
    if (n != ps.size())
        throw std::runtime_error(path + ": holds " + std::to_string(n) + " tensors, model expects " +
                                 std::to_string(ps.size()));
    for (auto& [name, v] : ps) {
        std::uint32_t len = 0;
        is.read(reinterpret_cast<char*>(&len), sizeof len);
        std::string stored(len, '\0');
        is.read(stored.data(), len);
        if (stored != name) throw std::runtime_error(path + ": expected tensor '" + name + "', found '" + stored + "'");
        std::uint32_t nd = 0;
        is.read(reinterpret_cast<char*>(&nd), sizeof nd);
        Shape s(nd);
        for (auto& d : s) {
            std::int32_t d32 = 0;
            is.read(reinterpret_cast<char*>(&d32), sizeof d32);
            d = d32;
        }
        if (s != v->shape())
            throw std::runtime_error(path + ": tensor '" + name + "' has shape " + shape_str(s) + ", model expects " +
                                     shape_str(v->shape()));
        auto& data = v->mutable_value().data;
        for (auto& x : data) {
            float f = 0;
            is.read(reinterpret_cast<char*>(&f), sizeof f);
            x = static_cast<T>(f);
        }
        if (!is) throw std::runtime_error(path + ": truncated at tensor '" + name + "'");
    }
}

}  // namespace bldm::nn

#include "mspcaps/capsule.hpp"

#include <cmath>
#include <string>

#include "mspcaps/errors.hpp"
#include "mspcaps/ops.hpp"

namespace mspcaps {

using detail::grad_buffer;
using detail::make_result;
using detail::Node;

template <typename T>
Tensor<T> squash(const Tensor<T>& v) {
    const Tensor<T> sq = sum(v * v, -1, true);
    const Tensor<T> factor = sq / ((sq + T(1)) * sqrt(sq + static_cast<T>(kSquashEps)));
    return v * factor;
}

GroupMap group_map(Grid fine, Grid coarse) {
    if (fine.size() == 0 || coarse.size() == 0 || fine.h % coarse.h != 0 || fine.w % coarse.w != 0) {
        throw ContractError("fine grid " + std::to_string(fine.h) + "x" + std::to_string(fine.w) +
                            " is not a block refinement of coarse grid " + std::to_string(coarse.h) + "x" +
                            std::to_string(coarse.w));
    }
    const std::size_t bh = fine.h / coarse.h;
    const std::size_t bw = fine.w / coarse.w;
    GroupMap g;
    g.groups = coarse.size();
    g.group_size = bh * bw;
    g.group_of.resize(fine.size());
    g.within_of.resize(fine.size());
    g.order.resize(fine.size());
    for (std::size_t r = 0; r < fine.h; ++r) {
        for (std::size_t c = 0; c < fine.w; ++c) {
            const std::size_t i = r * fine.w + c;
            const std::size_t k = (r / bh) * coarse.w + c / bw;
            const std::size_t m = (r % bh) * bw + c % bw;
            g.group_of[i] = k;
            g.within_of[i] = m;
            g.order[k * g.group_size + m] = i;
        }
    }
    return g;
}

namespace {

template <typename T>
void check_caps(const CapsuleSet<T>& u, const char* what) {
    if (u.caps.rank() != 3) {
        throw ShapeError(std::string(what) + " capsules must be B x n x d, got " + shape_str(u.caps.shape()));
    }
    if (u.grid && u.grid->size() != u.count()) {
        throw ShapeError(std::string(what) + " grid does not match capsule count " + std::to_string(u.count()));
    }
}

}  // namespace

template <typename T>
CapsuleSet<T> car_forward(const CapsuleSet<T>& u1, const CapsuleSet<T>& u2, const CarParams<T>& params, Mode mode,
                          Rng& rng, CarTrace<T>* trace) {
    check_caps(u1, "fine");
    check_caps(u2, "coarse");
    if (!u1.grid || !u2.grid) {
        throw ContractError("CAR inputs need patch grids");
    }
    const Shape& w2s = params.W2.shape();
    if (w2s.size() != 4) {
        throw ShapeError("W2 must be n_out x n_in2 x d_in2 x d_out, got " + shape_str(w2s));
    }
    const std::size_t batch = u1.batch();
    const std::size_t n_out = w2s[0];
    const std::size_t d_out = w2s[3];
    if (u2.batch() != batch) {
        throw ShapeError("CAR inputs disagree on batch size");
    }
    if (w2s[1] != u2.count() || w2s[2] != u2.dim()) {
        throw ShapeError("W2 " + shape_str(w2s) + " does not fit coarse capsules " + shape_str(u2.caps.shape()));
    }
    if (u1.count() % u2.count() != 0) {
        throw ContractError("group size " + std::to_string(u1.count()) + "/" + std::to_string(u2.count()) +
                            " is not an integer");
    }
    const GroupMap gm = group_map(*u1.grid, *u2.grid);
    const std::size_t k = gm.groups;
    const std::size_t s = gm.group_size;

    // Coarse votes: B x n_out x k x 1 x d_out.
    const Tensor<T> u2v = reshape(u2.caps, {batch, 1, k, 1, u2.dim()});
    const Tensor<T> votes2 = matmul(u2v, params.W2);

    Tensor<T> votes1;
    if (params.shared()) {
        if (u1.dim() != u2.dim()) {
            throw ContractError("shared CAR weights need equal capsule dims, got " + std::to_string(u1.dim()) +
                                " and " + std::to_string(u2.dim()));
        }
        const Tensor<T> grouped = reshape(index_select(u1.caps, 1, gm.order), {batch, 1, k, s, u1.dim()});
        votes1 = matmul(grouped, params.W2);
    } else {
        const Shape& w1s = params.W1->shape();
        if (w1s.size() != 4 || w1s[0] != n_out || w1s[1] != u1.count() || w1s[2] != u1.dim() || w1s[3] != d_out) {
            throw ShapeError("W1 " + shape_str(w1s) + " does not fit fine capsules " + shape_str(u1.caps.shape()));
        }
        const Tensor<T> u1v = reshape(u1.caps, {batch, 1, u1.count(), 1, u1.dim()});
        const Tensor<T> flat = matmul(u1v, *params.W1);  // B x n_out x n_in1 x 1 x d_out
        votes1 = reshape(index_select(flat, 2, gm.order), {batch, n_out, k, s, d_out});
    }

    const Tensor<T> dots = sum(votes1 * votes2, -1);  // B x n_out x k x s
    const Tensor<T> agreement = max(dots / static_cast<T>(std::sqrt(static_cast<double>(d_out))), -1);
    const Tensor<T> coupling = softmax(agreement, params.softmax_axis == SoftmaxAxis::outputs ? 1 : 2);
    const Tensor<T> dropped = dropout(coupling, params.dropout_rate, mode, rng);

    const Tensor<T> coarse = reshape(votes2, {batch, n_out, k, d_out});
    const Tensor<T> weighted = reshape(dropped, {batch, n_out, k, 1}) * coarse;
    const Tensor<T> v = squash(sum(weighted, 2));

    if (trace) {
        trace->votes_fine = votes1;
        trace->votes_coarse = coarse;
        trace->agreement = agreement;
        trace->coupling = coupling;
    }
    CapsuleSet<T> out{v, std::nullopt, -1};
    if (n_out == u2.count()) {
        out.grid = u2.grid;
        out.scale_id = u2.scale_id;
    }
    return out;
}

template <typename T>
CapsuleSet<T> dynamic_routing(const CapsuleSet<T>& u, const Tensor<T>& W, std::size_t iters) {
    check_caps(u, "input");
    if (iters == 0) {
        throw ContractError("dynamic routing needs at least one iteration");
    }
    const Shape& ws = W.shape();
    if (ws.size() != 4 || ws[1] != u.count() || ws[2] != u.dim()) {
        throw ShapeError("routing weight " + shape_str(ws) + " does not fit capsules " + shape_str(u.caps.shape()));
    }
    const std::size_t batch = u.batch();
    const std::size_t n_out = ws[0];
    const std::size_t n_in = ws[1];
    const std::size_t d_out = ws[3];

    const Tensor<T> votes = reshape(matmul(reshape(u.caps, {batch, 1, n_in, 1, u.dim()}), W),
                                    {batch, n_out, n_in, d_out});
    Tensor<T> logits = Tensor<T>::zeros({batch, n_out, n_in});
    Tensor<T> v;
    for (std::size_t it = 0; it < iters; ++it) {
        const Tensor<T> c = softmax(logits, 1);
        v = squash(sum(reshape(c, {batch, n_out, n_in, 1}) * votes, 2));
        if (it + 1 < iters) {
            logits = logits + sum(votes * reshape(v, {batch, n_out, 1, d_out}), -1);
        }
    }
    return CapsuleSet<T>{v, std::nullopt, -1};
}

template <typename T>
Tensor<T> margin_loss(const CapsuleSet<T>& class_caps, const std::vector<int>& labels, const MarginLossParams& mp) {
    check_caps(class_caps, "class");
    const std::size_t batch = class_caps.batch();
    const std::size_t classes = class_caps.count();
    const std::size_t d = class_caps.dim();
    if (labels.size() != batch) {
        throw ContractError("got " + std::to_string(labels.size()) + " labels for a batch of " +
                            std::to_string(batch));
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
        }
    }
    const T* V = class_caps.caps.data().data();
    std::vector<T> norms(batch * classes);
    T total = T(0);
    for (std::size_t b = 0; b < batch; ++b) {
        T item = T(0);
        for (std::size_t j = 0; j < classes; ++j) {
            const T* vec = V + (b * classes + j) * d;
            T sq = T(0);
            for (std::size_t t = 0; t < d; ++t) sq += vec[t] * vec[t];
            const T n = std::sqrt(sq);
            norms[b * classes + j] = n;
            if (static_cast<std::size_t>(labels[b]) == j) {
                const T h = std::max(T(0), static_cast<T>(mp.m_plus) - n);
                item += h * h;
            } else {
                const T h = std::max(T(0), n - static_cast<T>(mp.m_minus));
                item += static_cast<T>(mp.lambda) * (h * h);
            }
        }
        total += item;
    }
    const T loss = total / static_cast<T>(batch);

    auto backward = [=, norms = std::move(norms)](Node<T>& self) {
        Node<T>& nv = *self.inputs[0];
        T* gv = grad_buffer(nv).data();
        const T* V = nv.data.data();
        const T g = self.grad[0] / static_cast<T>(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t j = 0; j < classes; ++j) {
                const T n = norms[b * classes + j];
                T dn;
                if (static_cast<std::size_t>(labels[b]) == j) {
                    dn = -T(2) * std::max(T(0), static_cast<T>(mp.m_plus) - n);
                } else {
                    dn = T(2) * static_cast<T>(mp.lambda) * std::max(T(0), n - static_cast<T>(mp.m_minus));
                }
                if (dn == T(0) || n == T(0)) {
                    continue;  // the norm is not differentiable at 0; take the zero subgradient
                }
                const T scale = g * dn / n;
                const std::size_t off = (b * classes + j) * d;
                for (std::size_t t = 0; t < d; ++t) gv[off + t] += scale * V[off + t];
            }
        }
    };
    return make_result<T>(Shape{}, std::vector<T>{loss}, "margin_loss", {class_caps.caps.node()},
                          std::move(backward));
}

template <typename T>
std::vector<T> capsule_norms(const CapsuleSet<T>& caps) {
    check_caps(caps, "class");
    const std::size_t rows = caps.batch() * caps.count();
    const std::size_t d = caps.dim();
    const T* V = caps.caps.data().data();
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T sq = T(0);
        for (std::size_t t = 0; t < d; ++t) sq += V[r * d + t] * V[r * d + t];
        out[r] = std::sqrt(sq);
    }
    return out;
}

template <typename T>
std::vector<int> predict(const CapsuleSet<T>& class_caps) {
    const std::vector<T> norms = capsule_norms(class_caps);
    const std::size_t classes = class_caps.count();
    std::vector<int> out(class_caps.batch());
    for (std::size_t b = 0; b < out.size(); ++b) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < classes; ++j) {
            if (norms[b * classes + j] > norms[b * classes + best]) best = j;
        }
        out[b] = static_cast<int>(best);
    }
    return out;
}

template <typename T>
PatchifyCaps<T>::PatchifyCaps(std::size_t in_ch, std::size_t dim, std::size_t patch, Grid grid, int scale_id,
                              Rng& rng)
    : dim_(dim),
      patch_(patch),
      grid_(grid),
      scale_id_(scale_id),
      conv_(in_ch, dim, 1, 1, 0, true, Init::xavier_normal, rng),
      pos_(Tensor<T>::zeros({grid.size(), dim}, true)),
      norm_(dim) {}

template <typename T>
CapsuleSet<T> PatchifyCaps<T>::forward(const Tensor<T>& features) const {
    const Tensor<T> pooled = avgpool2d(features, patch_, patch_);
    const Grid g{pooled.dim(2), pooled.dim(3)};
    if (g != grid_) {
        throw ShapeError("patchify expected a " + std::to_string(grid_.h) + "x" + std::to_string(grid_.w) +
                         " patch grid, input " + shape_str(features.shape()) + " gives " + std::to_string(g.h) +
                         "x" + std::to_string(g.w));
    }
    const Tensor<T> projected = conv_.forward(pooled);  // B x d x h x w
    const std::size_t batch = features.dim(0);
    const Tensor<T> flat = reshape(permute(projected, {0, 2, 3, 1}), {batch, grid_.size(), dim_});
    return CapsuleSet<T>{norm_.forward(flat + pos_), grid_, scale_id_};
}

template <typename T>
void PatchifyCaps<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    conv_.collect(prefix + ".proj", out);
    out.push_back({prefix + ".pos", pos_, false});
    norm_.collect(prefix + ".norm", out);
}

template <typename T>
CarBlock<T>::CarBlock(std::size_t n_out, std::size_t n_in1, std::size_t d_in1, std::size_t n_in2, std::size_t d_in2,
                      std::size_t d_out, bool shared, double dropout_rate, SoftmaxAxis axis, Rng& rng) {
    if (shared && d_in1 != d_in2) {
        throw ContractError("shared CAR weights need d_in1 == d_in2, got " + std::to_string(d_in1) + " and " +
                            std::to_string(d_in2));
    }
    if (n_in2 == 0 || n_in1 % n_in2 != 0) {
        throw ContractError("CAR group size " + std::to_string(n_in1) + "/" + std::to_string(n_in2) +
                            " is not an integer");
    }
    if (!shared) {
        const Shape s1{n_out, n_in1, d_in1, d_out};
        params_.W1 = init_kaiming<T>(s1, projection_fans(s1), rng);
    }
    const Shape s2{n_out, n_in2, d_in2, d_out};
    params_.W2 = init_kaiming<T>(s2, projection_fans(s2), rng);
    params_.dropout_rate = dropout_rate;
    params_.softmax_axis = axis;
}

template <typename T>
void CarBlock<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    if (params_.W1) {
        out.push_back({prefix + ".W1", *params_.W1, true});
    }
    out.push_back({prefix + ".W2", params_.W2, true});
}

template <typename T>
DynamicRoutingBlock<T>::DynamicRoutingBlock(std::size_t n_out, std::size_t n_in, std::size_t d_in, std::size_t d_out,
                                            std::size_t iters, Rng& rng)
    : iters_(iters) {
    const Shape s{n_out, n_in, d_in, d_out};
    W_ = init_kaiming<T>(s, projection_fans(s), rng);
}

template <typename T>
void DynamicRoutingBlock<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    out.push_back({prefix + ".W", W_, true});
}

#define MSPCAPS_INSTANTIATE_CAPSULE(T)                                                                        \
    template Tensor<T> squash(const Tensor<T>&);                                                              \
    template CapsuleSet<T> car_forward(const CapsuleSet<T>&, const CapsuleSet<T>&, const CarParams<T>&, Mode, \
                                       Rng&, CarTrace<T>*);                                                   \
    template CapsuleSet<T> dynamic_routing(const CapsuleSet<T>&, const Tensor<T>&, std::size_t);              \
    template Tensor<T> margin_loss(const CapsuleSet<T>&, const std::vector<int>&, const MarginLossParams&);   \
    template std::vector<int> predict(const CapsuleSet<T>&);                                                  \
    template std::vector<T> capsule_norms(const CapsuleSet<T>&);                                              \
    template class PatchifyCaps<T>;                                                                           \
    template class CarBlock<T>;                                                                               \
    template class DynamicRoutingBlock<T>;

MSPCAPS_INSTANTIATE_CAPSULE(float)
MSPCAPS_INSTANTIATE_CAPSULE(double)

}  // namespace mspcaps

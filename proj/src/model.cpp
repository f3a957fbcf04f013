#include "cmrt/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cmrt {

int64_t downsampled_len(int64_t t) { return ((t + 1) / 2 + 1) / 2; }

namespace {

void add_linear(Model& m, Rng& rng, const std::string& name, int64_t in,
                int64_t out, bool bias = true) {
    m.params[name + ".W"] = randn({in, out}, rng, 0.02, true);
    if (bias) m.params[name + ".b"] = zeros({out}, true);
}

void add_layer_norm(Model& m, const std::string& name, int64_t d) {
    m.params[name + ".g"] = make_tensor({d}, std::vector<double>(d, 1.0), true);
    m.params[name + ".b"] = zeros({d}, true);
}

void add_attention(Model& m, Rng& rng, const std::string& name, int64_t d) {
    add_linear(m, rng, name + ".q", d, d, false);
    add_linear(m, rng, name + ".k", d, d, false);
    add_linear(m, rng, name + ".v", d, d, false);
    add_linear(m, rng, name + ".o", d, d, false);
}

void add_encoder_layer(Model& m, Rng& rng, const std::string& name, int64_t d,
                       int64_t ffn) {
    add_layer_norm(m, name + ".ln1", d);
    add_attention(m, rng, name + ".attn", d);
    add_layer_norm(m, name + ".ln2", d);
    add_linear(m, rng, name + ".ffn1", d, ffn);
    add_linear(m, rng, name + ".ffn2", ffn, d);
}

void add_decoder_layer(Model& m, Rng& rng, const std::string& name, int64_t d,
                       int64_t ffn) {
    add_layer_norm(m, name + ".ln1", d);
    add_attention(m, rng, name + ".self", d);
    add_layer_norm(m, name + ".ln2", d);
    add_attention(m, rng, name + ".cross", d);
    add_layer_norm(m, name + ".ln3", d);
    add_linear(m, rng, name + ".ffn1", d, ffn);
    add_linear(m, rng, name + ".ffn2", ffn, d);
}

}  // namespace

Model Model::init(const ModelDims& dims, uint64_t seed) {
    if (dims.vocab <= 0) throw Error("Model::init: vocab size must be positive");
    Model m;
    m.dims = dims;
    Rng rng(seed);
    add_linear(m, rng, "frontend.proj", dims.d_in, dims.d);
    add_linear(m, rng, "frontend.conv1", 5LL * dims.d, dims.d);
    add_linear(m, rng, "frontend.conv2", 5LL * dims.d, dims.d);
    for (int i = 0; i < dims.n_speech; ++i)
        add_encoder_layer(m, rng, "speech.l" + std::to_string(i), dims.d, dims.ffn);
    add_layer_norm(m, "speech.lnf", dims.d);
    m.params["embed.table"] = randn({dims.vocab, dims.d}, rng, 0.02, true);
    for (int i = 0; i < dims.n_enc; ++i)
        add_encoder_layer(m, rng, "enc.l" + std::to_string(i), dims.d, dims.ffn);
    add_layer_norm(m, "enc.lnf", dims.d);
    for (int i = 0; i < dims.n_dec; ++i)
        add_decoder_layer(m, rng, "dec.l" + std::to_string(i), dims.d, dims.ffn);
    add_layer_norm(m, "dec.lnf", dims.d);
    return m;
}

const Tensor& Model::p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
}

Tensor Model::positional_signal(int64_t len) const {
    int64_t d = dims.d;
    std::vector<double> v(len * d);
    for (int64_t pos = 0; pos < len; ++pos) {
        for (int64_t i = 0; i < d / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / d);
            v[pos * d + 2 * i] = std::sin(pos * freq);
            v[pos * d + 2 * i + 1] = std::cos(pos * freq);
        }
    }
    return make_tensor({len, d}, std::move(v));
}

namespace {

Tensor linear(const Model& m, const std::string& name, const Tensor& x) {
    Tensor y = matmul(x, m.p(name + ".W"));
    auto it = m.params.find(name + ".b");
    if (it != m.params.end()) y = add_bias(y, it->second);
    return y;
}

Tensor ln(const Model& m, const std::string& name, const Tensor& x) {
    return layer_norm(x, m.p(name + ".g"), m.p(name + ".b"));
}

Tensor attention(const Model& m, const std::string& name, const Tensor& q_in,
                 const Tensor& kv_in, const Tensor& mask) {
    int64_t d = m.dims.d;
    int64_t h = m.dims.heads;
    int64_t dk = d / h;
    Tensor q = matmul(q_in, m.p(name + ".q.W"));
    Tensor k = matmul(kv_in, m.p(name + ".k.W"));
    Tensor v = matmul(kv_in, m.p(name + ".v.W"));
    std::vector<Tensor> heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    for (int64_t i = 0; i < h; ++i) {
        Tensor qh = slice_cols(q, i * dk, (i + 1) * dk);
        Tensor kh = slice_cols(k, i * dk, (i + 1) * dk);
        Tensor vh = slice_cols(v, i * dk, (i + 1) * dk);
        Tensor scores = scalar_mul(matmul_nt(qh, kh), scale);
        if (mask) scores = add(scores, mask);
        heads.push_back(matmul(softmax(scores), vh));
    }
    return matmul(concat(heads, 1), m.p(name + ".o.W"));
}

Tensor ffn_block(const Model& m, const std::string& name, const Tensor& x) {
    return linear(m, name + ".ffn2", gelu(linear(m, name + ".ffn1", x)));
}

Tensor encoder_layer(const Model& m, const std::string& name, Tensor x) {
    Tensor n1 = ln(m, name + ".ln1", x);
    x = add(x, attention(m, name + ".attn", n1, n1, nullptr));
    x = add(x, ffn_block(m, name, ln(m, name + ".ln2", x)));
    return x;
}

Tensor causal_mask(int64_t n) {
    std::vector<double> v(n * n, 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) v[i * n + j] = -1e9;
    return make_tensor({n, n}, std::move(v));
}

// windowed linear projection, kernel 5, stride 2, zero padding 2
Tensor conv_block(const Model& m, const std::string& name, const Tensor& x) {
    int64_t t = x->shape[0], d = x->shape[1];
    Tensor padded = concat({zeros({2, d}), x, zeros({2, d})}, 0);
    int64_t t_out = (t + 1) / 2;
    std::vector<Tensor> windows;
    windows.reserve(t_out);
    for (int64_t i = 0; i < t_out; ++i)
        windows.push_back(reshape(slice_rows(padded, 2 * i, 2 * i + 5), {1, 5 * d}));
    return gelu(linear(m, name, concat(windows, 0)));
}

}  // namespace

EncoderOutput Model::encode_speech(const Tensor& raw_frames) const {
    if (raw_frames->shape.size() != 2 || raw_frames->shape[1] != dims.d_in)
        throw Error("encode_speech: expected (T x d_in) input");
    int64_t t = raw_frames->shape[0];
    if (t < kMinSpeechFrames)
        throw Error("encode_speech: input too short (" + std::to_string(t) +
                    " frames, need >= " + std::to_string(kMinSpeechFrames) + ")");
    Tensor x = gelu(linear(*this, "frontend.proj", raw_frames));
    x = conv_block(*this, "frontend.conv1", x);
    x = conv_block(*this, "frontend.conv2", x);
    x = add(x, positional_signal(x->shape[0]));
    for (int i = 0; i < dims.n_speech; ++i)
        x = encoder_layer(*this, "speech.l" + std::to_string(i), x);
    x = ln(*this, "speech.lnf", x);
    return {x, Modality::Speech};
}

EncoderOutput Model::embed_text(const std::vector<int64_t>& ids) const {
    Tensor e = embedding_lookup(p("embed.table"), ids);
    if (!ids.empty()) e = add(e, positional_signal(static_cast<int64_t>(ids.size())));
    return {e, Modality::Text};
}

Tensor Model::translation_encode(const Tensor& src) const {
    Tensor x = src;
    for (int i = 0; i < dims.n_enc; ++i)
        x = encoder_layer(*this, "enc.l" + std::to_string(i), x);
    return ln(*this, "enc.lnf", x);
}

namespace {

Tensor decode_logits(const Model& m, const Tensor& memory,
                     const std::vector<int64_t>& dec_in) {
    Tensor x = add(embedding_lookup(m.p("embed.table"), dec_in),
                   m.positional_signal(static_cast<int64_t>(dec_in.size())));
    Tensor mask = causal_mask(static_cast<int64_t>(dec_in.size()));
    for (int i = 0; i < m.dims.n_dec; ++i) {
        std::string name = "dec.l" + std::to_string(i);
        Tensor q = ln(m, name + ".ln1", x);
        x = add(x, attention(m, name + ".self", q, q, mask));
        x = add(x, attention(m, name + ".cross", ln(m, name + ".ln2", x), memory,
                             nullptr));
        x = add(x, ffn_block(m, name, ln(m, name + ".ln3", x)));
    }
    x = ln(m, "dec.lnf", x);
    // output projection tied to the embedding table
    return matmul_nt(x, m.p("embed.table"));
}

}  // namespace

ForwardResult Model::translate_forward(const EncoderOutput& src,
                                       const std::vector<int64_t>& tgt) const {
    // an empty target is legal: the decoder sees [BOS] and is scored on EOS
    constexpr int64_t kBos = 0, kEos = 1;
    Tensor memory = translation_encode(src.frames);
    std::vector<int64_t> dec_in;
    dec_in.push_back(kBos);
    dec_in.insert(dec_in.end(), tgt.begin(), tgt.end());
    std::vector<int64_t> gold = tgt;
    gold.push_back(kEos);
    Tensor logits = decode_logits(*this, memory, dec_in);
    return {log_softmax(logits), cross_entropy_with_logits(logits, gold)};
}

std::vector<int64_t> Model::beam_decode(const EncoderOutput& src, int beam,
                                        int max_len) const {
    if (beam < 1) throw Error("beam_decode: beam must be >= 1");
    constexpr int64_t kBos = 0, kEos = 1;
    Tensor memory = translation_encode(src.frames);

    struct Hyp {
        std::vector<int64_t> ids;  // without sentinels
        double score = 0.0;        // total log-prob
        bool done = false;
        double norm() const {
            return score / static_cast<double>(std::max<size_t>(1, ids.size() + 1));
        }
    };
    std::vector<Hyp> live = {Hyp{}};
    std::vector<Hyp> finished;
    for (int step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<Hyp> cand;
        for (const auto& h : live) {
            std::vector<int64_t> dec_in;
            dec_in.push_back(kBos);
            dec_in.insert(dec_in.end(), h.ids.begin(), h.ids.end());
            Tensor lp = log_softmax(decode_logits(*this, memory, dec_in));
            int64_t last = lp->shape[0] - 1;
            int64_t v = lp->shape[1];
            const double* row = &lp->value[last * v];
            // top-`beam` token ids from the last row, ties by lower id
            std::vector<int64_t> idx(v);
            for (int64_t i = 0; i < v; ++i) idx[i] = i;
            std::partial_sort(idx.begin(), idx.begin() + std::min<int64_t>(beam, v),
                              idx.end(), [&](int64_t a, int64_t b) {
                                  if (row[a] != row[b]) return row[a] > row[b];
                                  return a < b;
                              });
            for (int64_t i = 0; i < std::min<int64_t>(beam, v); ++i) {
                Hyp nh = h;
                nh.score += row[idx[i]];
                if (idx[i] == kEos) {
                    nh.done = true;
                    finished.push_back(nh);
                } else {
                    nh.ids.push_back(idx[i]);
                    cand.push_back(nh);
                }
            }
        }
        std::stable_sort(cand.begin(), cand.end(),
                         [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
        if (static_cast<int>(cand.size()) > beam) cand.resize(beam);
        live = std::move(cand);
    }
    // hypotheses that hit the length limit are scored as if terminated, so
    // every comparison is over an EOS-terminated sequence
    for (Hyp h : live) {
        std::vector<int64_t> dec_in;
        dec_in.push_back(kBos);
        dec_in.insert(dec_in.end(), h.ids.begin(), h.ids.end());
        Tensor lp = log_softmax(decode_logits(*this, memory, dec_in));
        int64_t last = lp->shape[0] - 1;
        h.score += lp->value[last * lp->shape[1] + kEos];
        h.done = true;
        finished.push_back(h);
    }
    if (finished.empty()) return {};
    auto best = std::max_element(finished.begin(), finished.end(),
                                 [](const Hyp& a, const Hyp& b) {
                                     return a.norm() < b.norm();
                                 });
    return best->ids;
}

void Model::freeze_speech_encoder() {
    for (auto& [name, t] : params) {
        if (name.rfind("frontend.", 0) == 0 || name.rfind("speech.", 0) == 0) {
            frozen.insert(name);
            t->requires_grad = false;
        }
    }
}

void Model::zero_all_grads() {
    for (auto& [name, t] : params) zero_grad(t);
}

void save_checkpoint(const Model& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open checkpoint '" + path + "' for writing");
    const char magic[8] = {'C', 'M', 'R', 'T', 'C', 'K', 'P', '1'};
    out.write(magic, 8);
    uint64_t count = m.params.size();
    out.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& [name, t] : m.params) {
        uint32_t nlen = static_cast<uint32_t>(name.size());
        out.write(reinterpret_cast<const char*>(&nlen), 4);
        out.write(name.data(), nlen);
        uint32_t ndim = static_cast<uint32_t>(t->shape.size());
        out.write(reinterpret_cast<const char*>(&ndim), 4);
        for (int64_t d : t->shape) {
            uint64_t du = static_cast<uint64_t>(d);
            out.write(reinterpret_cast<const char*>(&du), 8);
        }
        out.write(reinterpret_cast<const char*>(t->value.data()),
                  static_cast<std::streamsize>(t->value.size() * sizeof(double)));
    }
}

void load_checkpoint(Model& m, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint '" + path + "'");
    char magic[8];
    const char want[8] = {'C', 'M', 'R', 'T', 'C', 'K', 'P', '1'};
    if (!in.read(magic, 8) || !std::equal(magic, magic + 8, want))
        throw Error("checkpoint '" + path + "' has a bad header");
    uint64_t count;
    if (!in.read(reinterpret_cast<char*>(&count), 8))
        throw Error("truncated checkpoint '" + path + "'");
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t nlen;
        if (!in.read(reinterpret_cast<char*>(&nlen), 4))
            throw Error("truncated checkpoint '" + path + "'");
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        uint32_t ndim;
        in.read(reinterpret_cast<char*>(&ndim), 4);
        std::vector<int64_t> shape(ndim);
        for (auto& d : shape) {
            uint64_t du;
            in.read(reinterpret_cast<char*>(&du), 8);
            d = static_cast<int64_t>(du);
        }
        auto it = m.params.find(name);
        if (it == m.params.end())
            throw Error("checkpoint '" + path + "' holds unknown parameter '" +
                        name + "'");
        if (it->second->shape != shape)
            throw Error("checkpoint '" + path + "' shape mismatch for '" + name + "'");
        if (!in.read(reinterpret_cast<char*>(it->second->value.data()),
                     static_cast<std::streamsize>(it->second->value.size() *
                                                  sizeof(double))))
            throw Error("truncated checkpoint '" + path + "' at '" + name + "'");
    }
}

std::map<std::string, std::vector<double>> snapshot_params(const Model& m) {
    std::map<std::string, std::vector<double>> snap;
    for (const auto& [name, t] : m.params) snap[name] = t->value;
    return snap;
}

void average_into(Model& m,
                  const std::vector<std::map<std::string, std::vector<double>>>& snaps) {
    if (snaps.empty()) throw Error("average_into: no snapshots");
    for (auto& [name, t] : m.params) {
        std::fill(t->value.begin(), t->value.end(), 0.0);
        for (const auto& snap : snaps) {
            const auto& v = snap.at(name);
            for (size_t i = 0; i < v.size(); ++i) t->value[i] += v[i];
        }
        for (auto& x : t->value) x /= static_cast<double>(snaps.size());
    }
}

void Adam::step(Model& model) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : model.params) {
        if (model.is_frozen(name)) continue;
        if (p->grad.size() != p->value.size()) continue;  // untouched this step
        auto& m1v = m1[name];
        auto& m2v = m2[name];
        if (m1v.size() != p->value.size()) {
            m1v.assign(p->value.size(), 0.0);
            m2v.assign(p->value.size(), 0.0);
        }
        for (size_t i = 0; i < p->value.size(); ++i) {
            double g = p->grad[i];
            m1v[i] = beta1 * m1v[i] + (1.0 - beta1) * g;
            m2v[i] = beta2 * m2v[i] + (1.0 - beta2) * g * g;
            p->value[i] -= lr * (m1v[i] / bc1) / (std::sqrt(m2v[i] / bc2) + eps);
        }
    }
    for (auto& [name, p] : model.params) zero_grad(p);
}

}  // namespace cmrt

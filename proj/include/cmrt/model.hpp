#pragma once

// Toy-scale speech translation model: speech frontend (frame projection plus
// two stride-2 windowed linear blocks), tiny transformer speech encoder,
// text embedding table, translation encoder-decoder with a tied output
// projection, and beam decoding.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "cmrt/tensor.hpp"

namespace cmrt {

struct ModelDims {
    int d_in = 16;
    int d = 64;
    int heads = 4;
    int ffn = 128;
    int n_speech = 2;
    int n_enc = 2;
    int n_dec = 2;
    int64_t vocab = 0;
    int max_pos = 512;
};

enum class Modality { Speech, Text, Mixup };

struct EncoderOutput {
    Tensor frames;  // (T' x d) or (L x d)
    Modality source = Modality::Text;
};

struct ForwardResult {
    Tensor log_probs;  // (|y|+1) x vocab, includes the end-sentinel position
    Tensor ce;         // scalar, mean over target positions
};

struct Model {
    ModelDims dims;
    std::map<std::string, Tensor> params;
    std::set<std::string> frozen;

    static Model init(const ModelDims& dims, uint64_t seed);

    const Tensor& p(const std::string& name) const;

    EncoderOutput encode_speech(const Tensor& raw_frames) const;
    EncoderOutput embed_text(const std::vector<int64_t>& ids) const;
    Tensor translation_encode(const Tensor& src) const;
    // teacher-forced pass; tgt are piece ids without sentinels
    ForwardResult translate_forward(const EncoderOutput& src,
                                    const std::vector<int64_t>& tgt) const;
    std::vector<int64_t> beam_decode(const EncoderOutput& src, int beam,
                                     int max_len) const;

    // marks the speech frontend + speech encoder as non-trainable
    void freeze_speech_encoder();
    bool is_frozen(const std::string& name) const { return frozen.count(name) > 0; }
    void zero_all_grads();

    // sinusoidal table, rows 0..len-1
    Tensor positional_signal(int64_t len) const;
};

// length required by the frontend
constexpr int64_t kMinSpeechFrames = 4;
int64_t downsampled_len(int64_t t);  // ceil(ceil(t/2)/2)

void save_checkpoint(const Model& m, const std::string& path);
void load_checkpoint(Model& m, const std::string& path);
// arithmetic mean of parameter snapshots, applied in place
void average_into(Model& m, const std::vector<std::map<std::string, std::vector<double>>>& snaps);
std::map<std::string, std::vector<double>> snapshot_params(const Model& m);

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::map<std::string, std::vector<double>> m1, m2;

    void step(Model& model);
};

}  // namespace cmrt

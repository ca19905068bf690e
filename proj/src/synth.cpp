#include <cmath>
#include <cstring>
#include <stdexcept>

#include "prvr/dataset.hpp"
#include "prvr/rng.hpp"

namespace prvr {

namespace {

constexpr uint64_t kVideoStream = 0x76696465;  // substream labels

uint64_t hash_str(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<double> gaussian_vec(Rng& rng, size_t d) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.next_gaussian();
    return v;
}

double dot_v(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Draws a unit vector orthogonal to `basis` (Gram-Schmidt with redraw).
std::vector<double> draw_orthonormal(Rng& rng, const std::vector<std::vector<double>>& basis,
                                     size_t d) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        std::vector<double> v = gaussian_vec(rng, d);
        for (const auto& b : basis) {
            double proj = dot_v(v, b);
            for (size_t i = 0; i < d; ++i) v[i] -= proj * b[i];
        }
        double nrm = std::sqrt(dot_v(v, v));
        if (nrm > 1e-8) {
            for (auto& x : v) x /= nrm;
            return v;
        }
    }
    throw std::runtime_error("gen_synthetic: failed to draw an orthonormal prototype");
}

std::string pad_id(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%05d", prefix, i);
    return buf;
}

}  // namespace

Dataset gen_synthetic(const SynthConfig& cfg) {
    if (cfg.n_videos < 1 || cfg.frames_per_video < 1 || cfg.events_min < 1 ||
        cfg.queries_per_video < 1 || cfg.d_v < 1 || cfg.d_q < 1) {
        throw std::invalid_argument("gen_synthetic: all counts must be >= 1");
    }
    if (cfg.events_max < cfg.events_min) {
        throw std::invalid_argument("gen_synthetic: events_max < events_min");
    }
    if (cfg.words_per_query < 2) {
        throw std::invalid_argument("gen_synthetic: queries need at least 2 word rows");
    }
    if (cfg.noise_std < 0.0) throw std::invalid_argument("gen_synthetic: noise_std < 0");
    if (cfg.frames_per_video < cfg.events_max) {
        throw std::invalid_argument("gen_synthetic: fewer frames than events per video");
    }
    const size_t d_latent = static_cast<size_t>(std::min(cfg.d_v, cfg.d_q));
    if (static_cast<size_t>(cfg.events_max) > d_latent) {
        throw std::invalid_argument(
            "gen_synthetic: embedding dimension too small to host near-orthogonal event "
            "prototypes (events_per_video " +
            std::to_string(cfg.events_max) + " > dim " + std::to_string(d_latent) + ")");
    }

    Rng rng_v(Rng::mix(cfg.seed, kVideoStream));
    Rng rng_q(Rng::mix(cfg.seed, hash_str(cfg.split)));

    // Event counts first so the prototype stream layout is stable.
    std::vector<int> events(static_cast<size_t>(cfg.n_videos));
    for (auto& e : events) {
        e = cfg.events_min +
            (cfg.events_max > cfg.events_min
                 ? static_cast<int>(rng_v.next_below(
                       static_cast<uint64_t>(cfg.events_max - cfg.events_min + 1)))
                 : 0);
    }
    size_t total_events = 0;
    for (int e : events) total_events += static_cast<size_t>(e);

    // Latent prototypes: exactly orthonormal globally when the dimension
    // allows it, otherwise orthonormal within each video and independent
    // across videos.
    std::vector<std::vector<double>> latent(total_events);
    if (total_events <= d_latent) {
        std::vector<std::vector<double>> basis;
        for (size_t k = 0; k < total_events; ++k) {
            latent[k] = draw_orthonormal(rng_v, basis, d_latent);
            basis.push_back(latent[k]);
        }
    } else {
        size_t k = 0;
        for (int e : events) {
            std::vector<std::vector<double>> basis;
            for (int j = 0; j < e; ++j) {
                latent[k] = draw_orthonormal(rng_v, basis, d_latent);
                basis.push_back(latent[k]);
                ++k;
            }
        }
    }

    // Orthonormal embeddings of the latent space into video/text feature space.
    auto make_embedding = [&](size_t d_out) {
        std::vector<std::vector<double>> cols;
        for (size_t j = 0; j < d_latent; ++j) cols.push_back(draw_orthonormal(rng_v, cols, d_out));
        return cols;  // cols[j] is the image of latent axis j
    };
    auto embed = [](const std::vector<std::vector<double>>& cols,
                    const std::vector<double>& z) {
        std::vector<double> out(cols[0].size(), 0.0);
        for (size_t j = 0; j < z.size(); ++j) {
            for (size_t i = 0; i < out.size(); ++i) out[i] += cols[j][i] * z[j];
        }
        return out;
    };
    const auto emb_v = make_embedding(static_cast<size_t>(cfg.d_v));
    const auto emb_q = make_embedding(static_cast<size_t>(cfg.d_q));

    Dataset ds;
    ds.split = cfg.split;
    ds.d_v = static_cast<size_t>(cfg.d_v);
    ds.d_q = static_cast<size_t>(cfg.d_q);

    size_t proto_base = 0;
    std::vector<size_t> video_proto_base(static_cast<size_t>(cfg.n_videos));
    std::vector<std::vector<std::pair<int, int>>> video_spans(static_cast<size_t>(cfg.n_videos));
    for (int v = 0; v < cfg.n_videos; ++v) {
        video_proto_base[static_cast<size_t>(v)] = proto_base;
        const int E = events[static_cast<size_t>(v)];
        const int L = cfg.frames_per_video;
        std::vector<double> frames(static_cast<size_t>(L) * ds.d_v);
        int start = 0;
        for (int e = 0; e < E; ++e) {
            int len = L / E + (e < L % E ? 1 : 0);
            video_spans[static_cast<size_t>(v)].push_back({start, start + len});
            auto proto = embed(emb_v, latent[proto_base + static_cast<size_t>(e)]);
            for (int f = start; f < start + len; ++f) {
                for (size_t i = 0; i < ds.d_v; ++i) {
                    frames[static_cast<size_t>(f) * ds.d_v + i] =
                        proto[i] + cfg.noise_std * rng_v.next_gaussian();
                }
            }
            start += len;
        }
        VideoRecord rec;
        rec.video_id = pad_id("v", v);
        rec.frames = Tensor::matrix(static_cast<size_t>(L), ds.d_v, std::move(frames));
        ds.videos.push_back(std::move(rec));
        proto_base += static_cast<size_t>(E);
    }

    for (int v = 0; v < cfg.n_videos; ++v) {
        const int E = events[static_cast<size_t>(v)];
        for (int qi = 0; qi < cfg.queries_per_video; ++qi) {
            const int e = qi % E;  // round-robin keeps every event described
            auto proto = embed(emb_q, latent[video_proto_base[static_cast<size_t>(v)] +
                                             static_cast<size_t>(e)]);
            const size_t L_q = static_cast<size_t>(cfg.words_per_query);
            std::vector<double> words(L_q * ds.d_q);
            for (size_t w = 0; w < L_q; ++w) {
                for (size_t i = 0; i < ds.d_q; ++i) {
                    words[w * ds.d_q + i] = proto[i] + cfg.noise_std * rng_q.next_gaussian();
                }
            }
            QueryRecord rec;
            rec.video_id = pad_id("v", v);
            rec.query_id = rec.video_id + "_" + cfg.split + "_" + pad_id("q", qi);
            rec.teacher_eos = Tensor::vec(
                std::vector<double>(words.end() - static_cast<long>(ds.d_q), words.end()));
            rec.words = Tensor::matrix(L_q, ds.d_q, std::move(words));
            rec.gt_span = video_spans[static_cast<size_t>(v)][static_cast<size_t>(e)];
            ds.queries.push_back(std::move(rec));
        }
    }
    ds.validate();
    return ds;
}

}  // namespace prvr

#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "eksft/checkpoint.hpp"
#include "eksft/model.hpp"
#include "eksft/rng.hpp"

using namespace eksft;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.vocab_size = 11;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.context_len = 8;
    c.seed = seed;
    return c;
}

std::vector<int> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
    std::vector<int> ids(n);
    for (auto& id : ids) {
        id = static_cast<int>(rng.below(vocab));
    }
    return ids;
}

fs::path temp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("eksft_model_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeads) {
    ModelConfig c = tiny_config();
    c.d_model = 63;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, HashIgnoresSeed) {
    EXPECT_EQ(tiny_config(1).architecture_hash(), tiny_config(2).architecture_hash());
    ModelConfig c = tiny_config();
    c.d_model = 32;
    EXPECT_NE(c.architecture_hash(), tiny_config().architecture_hash());
}

TEST(Init, SeedDeterminesWeights) {
    EXPECT_EQ(init_parameters(tiny_config(7)), init_parameters(tiny_config(7)));
    EXPECT_FALSE(init_parameters(tiny_config(3)) == init_parameters(tiny_config(4)));
}

TEST(Init, GainsOneBiasesZero) {
    const auto p = init_parameters(tiny_config());
    for (const auto& s : p.slots()) {
        const auto v = p.view(s.name);
        if (is_gain(s.name)) {
            for (double x : v) EXPECT_EQ(x, 1.0) << s.name;
        } else if (is_bias(s.name)) {
            for (double x : v) EXPECT_EQ(x, 0.0) << s.name;
        }
    }
}

TEST(Forward, LogitsHaveExpectedShape) {
    const auto p = init_parameters(tiny_config());
    Rng rng(1);
    const auto ids = random_ids(3 * 5, 11, rng);
    const Tensor logits = forward_logits(p, 3, 5, ids);
    EXPECT_EQ(logits.shape(), (std::vector<std::size_t>{3, 5, 11}));
    EXPECT_TRUE(logits.all_finite());
}

TEST(Forward, RejectsOverlongAndOutOfVocab) {
    const auto p = init_parameters(tiny_config());
    EXPECT_THROW(forward_logits(p, 1, 9, std::vector<int>(9, 1)), LengthError);
    EXPECT_THROW(forward_logits(p, 1, 2, std::vector<int>{1, 11}), InputError);
}

TEST(Forward, CausalPrefixInvariance) {
    const auto p = init_parameters(tiny_config(7));
    Rng rng(2);
    auto ids = random_ids(8, 11, rng);
    const Tensor a = forward_logits(p, 1, 8, ids);
    ids[5] = (ids[5] + 3) % 11;
    ids[7] = (ids[7] + 1) % 11;
    const Tensor b = forward_logits(p, 1, 8, ids);
    for (std::size_t i = 0; i < 5 * 11; ++i) {
        EXPECT_EQ(a[i], b[i]) << "position " << i / 11;
    }
    bool changed = false;
    for (std::size_t i = 5 * 11; i < 6 * 11; ++i) {
        changed = changed || a[i] != b[i];
    }
    EXPECT_TRUE(changed);
}

TEST(Forward, BatchRowsAreIndependent) {
    const auto p = init_parameters(tiny_config(5));
    Rng rng(3);
    const auto ids = random_ids(2 * 6, 11, rng);
    const Tensor both = forward_logits(p, 2, 6, ids);
    const Tensor second = forward_logits(p, 1, 6, std::span<const int>(ids).subspan(6));
    for (std::size_t i = 0; i < second.numel(); ++i) {
        EXPECT_NEAR(both[6 * 11 + i], second[i], 1e-12);
    }
}

TEST(Forward, IdenticalSequencesGiveIdenticalRows) {
    const auto p = init_parameters(tiny_config(6));
    Rng rng(8);
    auto ids = random_ids(6, 11, rng);
    ids.insert(ids.end(), ids.begin(), ids.end());
    const Tensor logits = forward_logits(p, 2, 6, ids);
    for (std::size_t i = 0; i < 6 * 11; ++i) {
        EXPECT_EQ(logits[i], logits[6 * 11 + i]);
    }
}

TEST(Backward, MatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto p = init_parameters(tiny_config(seed));
        Rng rng(100 + seed);
        // Larger weights make the check sensitive to attention and MLP terms.
        for (auto& v : p.values()) {
            v += rng.normal(0.0, 0.3);
        }
        const auto ids = random_ids(2 * 5, 11, rng);
        Tensor w({2, 5, 11});
        for (auto& x : w.storage()) {
            x = rng.normal();
        }
        auto loss = [&](const ParameterSet& q) {
            const Tensor logits = forward_logits(q, 2, 5, ids);
            double s = 0.0;
            for (std::size_t i = 0; i < logits.numel(); ++i) {
                s += logits[i] * w[i];
            }
            return s;
        };
        const auto fr = forward(p, 2, 5, ids);
        const ParameterSet g = backward(p, fr.cache, w);
        double worst = 0.0;
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t i = rng.below(p.size());
            ParameterSet q = p;
            const double h = 1e-4;
            q.values()[i] = p.values()[i] + h;
            const double fp = loss(q);
            q.values()[i] = p.values()[i] - h;
            const double fm = loss(q);
            const double fd = (fp - fm) / (2 * h);
            const double a = g.values()[i];
            // Key biases shift every score equally, so their gradient is exactly zero
            // and only FD round-off remains there.
            if (std::abs(fd) < 1e-6) {
                EXPECT_LE(std::abs(a - fd), 1e-9);
            } else {
                worst = std::max(worst, std::abs(a - fd) / (std::abs(fd) + 1e-8));
            }
        }
        EXPECT_LE(worst, 1e-5) << "seed " << seed;
    }
}

TEST(Decoder, MatchesBatchedForward) {
    const auto p = init_parameters(tiny_config(9));
    Rng rng(4);
    const auto ids = random_ids(8, 11, rng);
    const Tensor full = forward_logits(p, 1, 8, ids);
    Decoder dec(p);
    for (std::size_t t = 0; t < 8; ++t) {
        const auto step = dec.step(ids[t]);
        for (std::size_t v = 0; v < 11; ++v) {
            EXPECT_NEAR(step[v], full[t * 11 + v], 1e-10);
        }
    }
    EXPECT_THROW(dec.step(1), LengthError);
    dec.reset();
    EXPECT_EQ(dec.position(), 0u);
}

TEST(Reference, SnapshotIsIndependentCopy) {
    auto p = init_parameters(tiny_config());
    const auto ref = snapshot_reference(p);
    p.values()[0] += 1.0;
    EXPECT_FALSE(ref.params() == p);
}

TEST(Reference, RejectsNonFinite) {
    auto p = init_parameters(tiny_config());
    p.values()[3] = NAN;
    EXPECT_THROW(snapshot_reference(p), NumericError);
}

TEST(Checkpoint, RoundTripEqualsStoragePrecision) {
    const auto dir = temp_dir("roundtrip");
    auto p = init_parameters(tiny_config(2));
    p.version = "sft-step4";
    save_checkpoint(p, dir / "ck", {7, "run"});
    const auto loaded = load_checkpoint_with_meta(dir / "ck");
    EXPECT_EQ(loaded.params, round_to_storage(p));
    EXPECT_EQ(loaded.params.version, "sft-step4");
    EXPECT_EQ(loaded.meta.seed, 7u);
    EXPECT_EQ(loaded.meta.run_id, "run");
}

TEST(Checkpoint, SavesAreByteIdentical) {
    const auto dir = temp_dir("bytes");
    const auto p = init_parameters(tiny_config(2));
    save_checkpoint(p, dir / "a");
    save_checkpoint(p, dir / "b");
    auto slurp = [](const fs::path& f) {
        std::ifstream in(f, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    EXPECT_EQ(slurp(weights_path(dir / "a")), slurp(weights_path(dir / "b")));
    EXPECT_EQ(slurp(manifest_path(dir / "a")), slurp(manifest_path(dir / "b")));
}

TEST(Checkpoint, TruncatedBlob) {
    const auto dir = temp_dir("trunc");
    save_checkpoint(init_parameters(tiny_config()), dir / "ck");
    fs::resize_file(weights_path(dir / "ck"), fs::file_size(weights_path(dir / "ck")) - 4);
    EXPECT_THROW(load_checkpoint(dir / "ck"), TruncatedBlobError);
}

TEST(Checkpoint, CorruptManifest) {
    const auto dir = temp_dir("corrupt");
    save_checkpoint(init_parameters(tiny_config()), dir / "ck");
    std::ofstream(manifest_path(dir / "ck")) << "{ not json";
    EXPECT_THROW(load_checkpoint(dir / "ck"), CorruptManifestError);
}

TEST(Checkpoint, HashMismatch) {
    const auto dir = temp_dir("hash");
    save_checkpoint(init_parameters(tiny_config()), dir / "ck");
    std::ifstream in(manifest_path(dir / "ck"));
    auto j = nlohmann::json::parse(in);
    in.close();
    j["config_hash"] = "0000000000000000";
    std::ofstream(manifest_path(dir / "ck")) << j.dump();
    EXPECT_THROW(load_checkpoint(dir / "ck"), ConfigHashMismatchError);
}

TEST(Checkpoint, ShapeMismatch) {
    const auto dir = temp_dir("shape");
    save_checkpoint(init_parameters(tiny_config()), dir / "ck");
    std::ifstream in(manifest_path(dir / "ck"));
    auto j = nlohmann::json::parse(in);
    in.close();
    j["tensors"][0]["shape"] = {11, 8};
    std::ofstream(manifest_path(dir / "ck")) << j.dump();
    EXPECT_THROW(load_checkpoint(dir / "ck"), ShapeMismatchError);
}

TEST(Checkpoint, MissingManifest) {
    EXPECT_THROW(load_checkpoint(temp_dir("missing") / "nope"), InputError);
}

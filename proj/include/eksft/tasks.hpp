#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "eksft/errors.hpp"
#include "eksft/hash.hpp"
#include "eksft/rng.hpp"

namespace eksft {

namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kAnswerMark = 3;
}  // namespace token

// Fixed character vocabulary. Special tokens have printable stand-ins so the
// mapping stays bijective: PAD '_', BOS '^', EOS '$', ANSWER_MARK '#'.
class Vocabulary {
public:
    static constexpr std::string_view kGlyphs = "_^$#0123456789+=,>abcdefghijklmn";
    static constexpr std::string_view kLetters = "abcdefghijklmn";

    static constexpr std::size_t size() { return kGlyphs.size(); }

    static int id_of(char c) {
        const auto pos = kGlyphs.find(c);
        return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
    }

    static char glyph_of(int id) {
        if (id < 0 || static_cast<std::size_t>(id) >= kGlyphs.size()) {
            throw InputError("token id " + std::to_string(id) + " has no glyph");
        }
        return kGlyphs[static_cast<std::size_t>(id)];
    }
};

static_assert(Vocabulary::size() == 32);

inline std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        const int id = Vocabulary::id_of(text[i]);
        if (id < 0) {
            throw TokenizationError("unknown character '" + std::string(1, text[i]) +
                                        "' at offset " + std::to_string(i),
                                    i);
        }
        ids.push_back(id);
    }
    return ids;
}

inline std::string detokenize(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        out.push_back(Vocabulary::glyph_of(id));
    }
    return out;
}

struct Sample {
    std::string prompt;    // e.g. "3+7+2="
    std::string response;  // e.g. "7+2=9,9+3=12#12" (EOS implicit)
    std::string answer;    // canonical gold answer, e.g. "12"

    std::vector<int> prompt_tokens() const { return tokenize(prompt); }

    // Response ids with the trailing EOS.
    std::vector<int> response_tokens() const {
        auto ids = tokenize(response);
        ids.push_back(token::kEos);
        return ids;
    }

    // BOS + prompt + response + EOS.
    std::size_t sequence_length() const { return 1 + prompt.size() + response.size() + 1; }

    friend bool operator==(const Sample&, const Sample&) = default;
};

enum class TaskFamily { mod_add_chain, reverse_copy };

inline std::string to_string(TaskFamily f) {
    return f == TaskFamily::mod_add_chain ? "mod_add_chain" : "reverse_copy";
}

inline TaskFamily parse_task_family(const std::string& s) {
    if (s == "mod_add_chain") {
        return TaskFamily::mod_add_chain;
    }
    if (s == "reverse_copy") {
        return TaskFamily::reverse_copy;
    }
    throw ConfigError("unknown task family '" + s + "'");
}

struct SplitCounts {
    std::size_t pretrain = 640;
    std::size_t sft = 64;
    std::size_t rl = 128;
    std::size_t eval = 64;

    std::size_t total() const { return pretrain + sft + rl + eval; }
};

struct TaskSpec {
    TaskFamily family = TaskFamily::mod_add_chain;
    std::size_t chain_length = 3;   // operands per mod_add_chain prompt
    std::size_t modulus = 100;      // mod_add_chain answers are sums mod this
    std::size_t string_length = 4;  // reverse_copy prompt length
    SplitCounts counts;
    std::uint64_t seed = 1;

    void validate() const {
        if (family == TaskFamily::mod_add_chain && (chain_length < 2 || modulus < 2)) {
            throw ConfigError("mod_add_chain needs chain_length >= 2 and modulus >= 2");
        }
        if (family == TaskFamily::reverse_copy && string_length < 1) {
            throw ConfigError("reverse_copy needs string_length >= 1");
        }
    }

    // Number of distinct prompts (saturating).
    std::uint64_t instance_space() const {
        const std::uint64_t base = family == TaskFamily::mod_add_chain
                                       ? 10
                                       : static_cast<std::uint64_t>(Vocabulary::kLetters.size());
        const std::size_t len = family == TaskFamily::mod_add_chain ? chain_length : string_length;
        std::uint64_t n = 1;
        for (std::size_t i = 0; i < len; ++i) {
            if (n > UINT64_MAX / base) {
                return UINT64_MAX;
            }
            n *= base;
        }
        return n;
    }
};

inline void to_json(nlohmann::json& j, const TaskSpec& s) {
    j = nlohmann::json{{"family", to_string(s.family)},
                       {"chain_length", s.chain_length},
                       {"modulus", s.modulus},
                       {"string_length", s.string_length},
                       {"counts",
                        {{"pretrain", s.counts.pretrain},
                         {"sft", s.counts.sft},
                         {"rl", s.counts.rl},
                         {"eval", s.counts.eval}}},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& s) {
    TaskSpec d;
    s.family = parse_task_family(j.value("family", to_string(d.family)));
    s.chain_length = j.value("chain_length", d.chain_length);
    s.modulus = j.value("modulus", d.modulus);
    s.string_length = j.value("string_length", d.string_length);
    s.seed = j.value("seed", d.seed);
    s.counts = d.counts;
    if (j.contains("counts")) {
        const auto& c = j.at("counts");
        s.counts.pretrain = c.value("pretrain", d.counts.pretrain);
        s.counts.sft = c.value("sft", d.counts.sft);
        s.counts.rl = c.value("rl", d.counts.rl);
        s.counts.eval = c.value("eval", d.counts.eval);
    }
}

// Strips leading zeros from all-digit strings ("012" -> "12", "000" -> "0").
inline std::string canonical_answer(std::string_view s) {
    const bool numeric =
        !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (!numeric) {
        return std::string(s);
    }
    const auto first = s.find_first_not_of('0');
    return first == std::string_view::npos ? std::string("0") : std::string(s.substr(first));
}

// True iff the text after the last ANSWER_MARK, up to EOS or the end,
// canonically equals the gold answer.
inline bool verify(const Sample& sample, std::span<const int> generated) {
    const auto mark = std::find(generated.rbegin(), generated.rend(), token::kAnswerMark);
    if (mark == generated.rend()) {
        return false;
    }
    const auto begin = mark.base();
    const auto end = std::find(begin, generated.end(), token::kEos);
    if (begin == end) {
        return false;
    }
    std::string text;
    for (auto it = begin; it != end; ++it) {
        if (*it < 0 || static_cast<std::size_t>(*it) >= Vocabulary::size()) {
            return false;
        }
        text.push_back(Vocabulary::glyph_of(*it));
    }
    return canonical_answer(text) == canonical_answer(sample.answer);
}

namespace detail {

inline std::vector<std::size_t> decode_instance(std::uint64_t id, std::size_t len,
                                                std::size_t base) {
    std::vector<std::size_t> digits(len);
    for (std::size_t i = len; i-- > 0;) {
        digits[i] = static_cast<std::size_t>(id % base);
        id /= base;
    }
    return digits;
}

// Scratchpad accumulates the operands in a per-sample random order:
// "3+7+2=" -> "7+2=9,9+3=12#12".
inline Sample make_mod_add(const std::vector<std::size_t>& operands, std::size_t modulus,
                           Rng& rng) {
    Sample s;
    for (std::size_t i = 0; i < operands.size(); ++i) {
        s.prompt += (i ? "+" : "") + std::to_string(operands[i]);
    }
    s.prompt += "=";
    std::vector<std::size_t> order = operands;
    rng.shuffle(order);
    std::size_t acc = order[0] % modulus;
    std::string pad;
    for (std::size_t i = 1; i < order.size(); ++i) {
        const std::size_t next = (acc + order[i]) % modulus;
        pad += (i > 1 ? "," : "") + std::to_string(acc) + "+" + std::to_string(order[i]) + "=" +
               std::to_string(next);
        acc = next;
    }
    s.answer = std::to_string(acc);
    s.response = pad + "#" + s.answer;
    return s;
}

inline Sample make_reverse(const std::vector<std::size_t>& letters) {
    Sample s;
    for (auto l : letters) {
        s.prompt.push_back(Vocabulary::kLetters[l]);
    }
    s.prompt += ">";
    s.answer = std::string(s.prompt.rbegin() + 1, s.prompt.rend());
    s.response = "#" + s.answer;
    return s;
}

}  // namespace detail

inline Sample make_sample(const TaskSpec& spec, std::uint64_t instance, std::uint64_t sample_seed) {
    Rng rng(sample_seed);
    if (spec.family == TaskFamily::mod_add_chain) {
        return detail::make_mod_add(detail::decode_instance(instance, spec.chain_length, 10),
                                    spec.modulus, rng);
    }
    return detail::make_reverse(
        detail::decode_instance(instance, spec.string_length, Vocabulary::kLetters.size()));
}

struct Dataset {
    std::vector<Sample> pretrain;
    std::vector<Sample> sft;
    std::vector<Sample> rl_prompts;
    std::vector<Sample> eval;
};

// Seeded partition of the instance space into four disjoint splits.
inline Dataset generate_dataset(const TaskSpec& spec) {
    spec.validate();
    const std::uint64_t space = spec.instance_space();
    const std::uint64_t need = spec.counts.total();
    if (need > space) {
        throw GenerationError("requested " + std::to_string(need) + " distinct instances but the " +
                              to_string(spec.family) + " space holds only " +
                              std::to_string(space));
    }
    Rng rng(derive_seed(spec.seed, 0x5eed));
    std::vector<std::uint64_t> ids;
    if (space <= 4'000'000) {
        ids.resize(space);
        for (std::uint64_t i = 0; i < space; ++i) {
            ids[i] = i;
        }
        rng.shuffle(ids);
        ids.resize(need);
    } else {
        std::unordered_set<std::uint64_t> seen;
        while (ids.size() < need) {
            const auto id = rng.below(space);
            if (seen.insert(id).second) {
                ids.push_back(id);
            }
        }
    }
    Dataset ds;
    std::size_t next = 0;
    auto fill = [&](std::vector<Sample>& out, std::size_t n, std::uint64_t split) {
        for (std::size_t i = 0; i < n; ++i, ++next) {
            out.push_back(make_sample(spec, ids[next], derive_seed(spec.seed, split, i)));
        }
    };
    fill(ds.pretrain, spec.counts.pretrain, 1);
    fill(ds.sft, spec.counts.sft, 2);
    fill(ds.rl_prompts, spec.counts.rl, 3);
    fill(ds.eval, spec.counts.eval, 4);
    return ds;
}

inline std::string to_jsonl(std::span<const Sample> samples) {
    std::string out;
    for (const auto& s : samples) {
        const nlohmann::json row = {{"prompt", s.prompt}, {"response", s.response},
                                    {"answer", s.answer}};
        out += row.dump();
        out += '\n';
    }
    return out;
}

inline std::vector<Sample> parse_jsonl(std::string_view text, const std::string& source = "") {
    std::vector<Sample> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            Sample s{j.at("prompt").get<std::string>(), j.at("response").get<std::string>(),
                     j.at("answer").get<std::string>()};
            tokenize(s.prompt);
            tokenize(s.response);
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw InputError(source + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const TokenizationError& e) {
            throw InputError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) {
        throw Error("failed writing " + path.string());
    }
}

inline std::vector<Sample> load_jsonl(const std::filesystem::path& path) {
    return parse_jsonl(read_file(path), path.string());
}

inline const std::array<std::string, 4>& split_names() {
    static const std::array<std::string, 4> names = {"pretrain", "sft", "rl_prompts", "eval"};
    return names;
}

// Writes the four split files and returns their git-style content hashes.
inline std::map<std::string, std::string> write_dataset(const Dataset& ds,
                                                        const std::filesystem::path& dir) {
    std::map<std::string, std::string> hashes;
    const std::array<const std::vector<Sample>*, 4> splits = {&ds.pretrain, &ds.sft,
                                                              &ds.rl_prompts, &ds.eval};
    for (std::size_t i = 0; i < splits.size(); ++i) {
        const std::string text = to_jsonl(*splits[i]);
        write_file(dir / (split_names()[i] + ".jsonl"), text);
        hashes[split_names()[i]] = git_blob_hash(text);
    }
    return hashes;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    ds.pretrain = load_jsonl(dir / "pretrain.jsonl");
    ds.sft = load_jsonl(dir / "sft.jsonl");
    ds.rl_prompts = load_jsonl(dir / "rl_prompts.jsonl");
    ds.eval = load_jsonl(dir / "eval.jsonl");
    return ds;
}

inline std::string dataset_hash(std::span<const Sample> samples) {
    return git_blob_hash(to_jsonl(samples));
}

}  // namespace eksft

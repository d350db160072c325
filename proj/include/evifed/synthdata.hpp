#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "evifed/errors.hpp"
#include "evifed/rng.hpp"
#include "evifed/tensor.hpp"

#include <json.hpp>

namespace evifed {

enum class QuestionType { closed, open };

struct VQAInstance {
  Tensor image;               // side x side, values in [0,1]
  std::vector<int> question;  // token ids
  int answer = 0;             // index into the shared answer list
  QuestionType type = QuestionType::closed;
};

// Shared answer list: 0 = yes, 1 = no, 2 + c = the count "c".
inline constexpr int kAnswerYes = 0;
inline constexpr int kAnswerNo = 1;
inline int count_answer(int count) { return 2 + count; }

// Question token ids.
inline constexpr int kTokPad = 0;
inline constexpr int kTokIs = 1;
inline constexpr int kTokPresent = 2;
inline constexpr int kTokHowMany = 3;
inline constexpr int kTokFamilyBase = 4;  // family f -> token 4 + f

enum class PatternFamily : int {
  stripes = 0,
  tilted_stripes,
  rings,
  checker,
  blobs,
  crosses,
  dots,
  bars,
};

inline constexpr std::size_t kFamilyCount = 8;
inline constexpr std::size_t kVariantsPerFamily = 64;

inline const char* family_name(PatternFamily f) {
  static constexpr std::array<const char*, kFamilyCount> names = {
      "stripes", "tilted_stripes", "rings", "checker",
      "blobs",   "crosses",        "dots",  "bars"};
  return names[static_cast<std::size_t>(f)];
}

/// One hospital "department": a visual pattern family plus noise level.
struct DepartmentSpec {
  PatternFamily family = PatternFamily::stripes;
  int variant = 0;
  double noise_sigma = 0.05;
};

/// Default department assignment. Families are distinct while T <= 8 and
/// cycle (with a bumped variant) beyond that; clients 0 and 1 always form
/// the planted related pair (stripes / tilted_stripes).
inline DepartmentSpec department_for_client(std::size_t t, double noise_sigma = 0.05) {
  DepartmentSpec spec;
  spec.family = static_cast<PatternFamily>(t % kFamilyCount);
  spec.variant = static_cast<int>(t / kFamilyCount);
  spec.noise_sigma = noise_sigma;
  return spec;
}

/// Declared overlap between pattern families: 1 within a family, 0 for
/// disjoint families, intermediate for families sharing an attribute.
inline double relatedness(const DepartmentSpec& a, const DepartmentSpec& b) {
  if (a.family == b.family) return 1.0;
  auto pair_is = [&](PatternFamily x, PatternFamily y) {
    return (a.family == x && b.family == y) || (a.family == y && b.family == x);
  };
  // Stripe-like trio shares the "parallel bands" attribute.
  if (pair_is(PatternFamily::stripes, PatternFamily::tilted_stripes)) return 0.5;
  if (pair_is(PatternFamily::stripes, PatternFamily::bars)) return 0.5;
  if (pair_is(PatternFamily::tilted_stripes, PatternFamily::bars)) return 0.5;
  // Small isolated marks.
  if (pair_is(PatternFamily::blobs, PatternFamily::dots)) return 0.5;
  if (pair_is(PatternFamily::crosses, PatternFamily::checker)) return 0.25;
  return 0.0;
}

struct ClientDataset {
  std::vector<VQAInstance> train, eval, test;

  std::size_t total() const { return train.size() + eval.size() + test.size(); }
};

struct DataDims {
  std::size_t side = 8;
  std::size_t answers = 8;
  std::size_t question_len = 8;
  std::size_t question_vocab = 32;
  double label_noise = 0.0;
};

namespace detail {

inline constexpr int kMaxCount = 4;
inline constexpr double kDark = 0.1;

inline double bright(int variant) { return 0.95 - 0.05 * (variant % 3); }

inline void draw_pattern(Tensor& img, PatternFamily family, int variant, int count,
                         Rng& rng) {
  const int side = static_cast<int>(img.rows());
  const double hi = bright(variant);
  auto set = [&](int r, int c) {
    if (r >= 0 && r < side && c >= 0 && c < side) img.at(r, c) = hi;
  };
  switch (family) {
    case PatternFamily::stripes:
      for (int k = 0; k < count; ++k) {
        const int r = ((k + 1) * side) / (count + 1);
        for (int c = 0; c < side; ++c) set(r, c);
      }
      break;
    case PatternFamily::tilted_stripes:
      for (int k = 0; k < count; ++k) {
        const int diag = ((k + 1) * (2 * side - 1)) / (count + 1);
        for (int r = 0; r < side; ++r) set(r, diag - r);
      }
      break;
    case PatternFamily::bars:
      for (int k = 0; k < count; ++k) {
        const int c = ((k + 1) * side) / (count + 1);
        for (int r = 0; r < side; ++r) set(r, c);
      }
      break;
    case PatternFamily::checker: {
      const int cell = count;  // the queried attribute is the cell size
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
          if (((r / cell) + (c / cell)) % 2 == 0) set(r, c);
      break;
    }
    case PatternFamily::rings: {
      const double mid = (side - 1) / 2.0;
      for (int k = 0; k < count; ++k) {
        const double radius = mid - k;
        for (int r = 0; r < side; ++r)
          for (int c = 0; c < side; ++c) {
            const double dist = std::max(std::abs(r - mid), std::abs(c - mid));
            if (std::abs(dist - radius) < 0.5) set(r, c);
          }
      }
      break;
    }
    case PatternFamily::blobs: {
      // count distinct 2x2 blocks on a 4x4 slot grid
      std::array<int, 16> slots;
      for (int i = 0; i < 16; ++i) slots[i] = i;
      for (int i = 15; i > 0; --i) std::swap(slots[i], slots[rng.below(i + 1)]);
      for (int k = 0; k < count; ++k) {
        const int r0 = (slots[k] / 4) * (side / 4), c0 = (slots[k] % 4) * (side / 4);
        set(r0, c0);
        set(r0 + 1, c0);
        set(r0, c0 + 1);
        set(r0 + 1, c0 + 1);
      }
      break;
    }
    case PatternFamily::crosses: {
      std::array<int, 4> slots = {0, 1, 2, 3};
      for (int i = 3; i > 0; --i) std::swap(slots[i], slots[rng.below(i + 1)]);
      for (int k = 0; k < count; ++k) {
        const int r = 2 + (slots[k] / 2) * 4, c = 2 + (slots[k] % 2) * 4;
        set(r, c);
        set(r - 1, c);
        set(r + 1, c);
        set(r, c - 1);
        set(r, c + 1);
      }
      break;
    }
    case PatternFamily::dots: {
      std::array<int, 16> slots;
      for (int i = 0; i < 16; ++i) slots[i] = i;
      for (int i = 15; i > 0; --i) std::swap(slots[i], slots[rng.below(i + 1)]);
      for (int k = 0; k < count; ++k) {
        set((slots[k] / 4) * 2, (slots[k] % 4) * 2 + 1);
      }
      break;
    }
  }
}

inline Tensor render(const DepartmentSpec& spec, bool present, int count,
                     std::size_t side, Rng& rng) {
  Tensor img(side, side, kDark);
  if (present) draw_pattern(img, spec.family, spec.variant, count, rng);
  if (spec.noise_sigma > 0.0) {
    for (auto& v : img.values()) {
      v = std::clamp(v + rng.normal(0.0, spec.noise_sigma), 0.0, 1.0);
    }
  }
  return img;
}

inline std::vector<int> closed_question(PatternFamily asked, std::size_t len) {
  std::vector<int> q(len, kTokPad);
  q[0] = kTokIs;
  q[1] = kTokFamilyBase + static_cast<int>(asked);
  q[2] = kTokPresent;
  return q;
}

inline std::vector<int> open_question(PatternFamily asked, std::size_t len) {
  std::vector<int> q(len, kTokPad);
  q[0] = kTokHowMany;
  q[1] = kTokFamilyBase + static_cast<int>(asked);
  return q;
}

}  // namespace detail

/// Instances for one department. Closed questions are exactly balanced
/// yes/no (+-1); open questions ask the pattern count, uniform over 1..4.
inline std::vector<VQAInstance> generate_client(const DepartmentSpec& spec,
                                                std::size_t n, std::uint64_t seed,
                                                const DataDims& dims = {}) {
  if (dims.answers < static_cast<std::size_t>(count_answer(detail::kMaxCount)) + 1) {
    throw config_error("synthdata: answer list of " + std::to_string(dims.answers) +
                       " cannot hold counts up to " + std::to_string(detail::kMaxCount));
  }
  Rng rng(seed);
  std::vector<VQAInstance> out;
  out.reserve(n);
  const std::size_t n_closed = n / 2;
  const std::size_t n_yes = n_closed / 2 + (n_closed % 2 == 1 && (seed & 1) ? 1 : 0);
  for (std::size_t i = 0; i < n; ++i) {
    VQAInstance inst;
    const int count = 1 + static_cast<int>(rng.below(detail::kMaxCount));
    if (i < n_closed) {
      inst.type = QuestionType::closed;
      const bool want_yes = i < n_yes;
      if (want_yes) {
        inst.image = detail::render(spec, true, count, dims.side, rng);
        inst.question = detail::closed_question(spec.family, dims.question_len);
        inst.answer = kAnswerYes;
      } else if (rng.uniform() < 0.5) {
        // pattern absent
        inst.image = detail::render(spec, false, 0, dims.side, rng);
        inst.question = detail::closed_question(spec.family, dims.question_len);
        inst.answer = kAnswerNo;
      } else {
        // foil: pattern present but the question asks another family
        inst.image = detail::render(spec, true, count, dims.side, rng);
        auto other = static_cast<PatternFamily>(
            (static_cast<int>(spec.family) + 1 + static_cast<int>(rng.below(kFamilyCount - 1))) %
            kFamilyCount);
        inst.question = detail::closed_question(other, dims.question_len);
        inst.answer = kAnswerNo;
      }
    } else {
      inst.type = QuestionType::open;
      inst.image = detail::render(spec, true, count, dims.side, rng);
      inst.question = detail::open_question(spec.family, dims.question_len);
      inst.answer = count_answer(count);
    }
    if (dims.label_noise > 0.0 && rng.uniform() < dims.label_noise) {
      inst.answer = static_cast<int>(rng.below(dims.answers));
    }
    out.push_back(std::move(inst));
  }
  // deterministic shuffle so the splits mix question types
  for (std::size_t i = out.size() - 1; i > 0; --i) {
    std::swap(out[i], out[rng.below(i + 1)]);
  }
  return out;
}

inline ClientDataset split_dataset(std::vector<VQAInstance> all) {
  ClientDataset ds;
  const std::size_t n = all.size();
  const std::size_t n_train = (n * 70) / 100;
  const std::size_t n_eval = (n * 15) / 100;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train) {
      ds.train.push_back(std::move(all[i]));
    } else if (i < n_train + n_eval) {
      ds.eval.push_back(std::move(all[i]));
    } else {
      ds.test.push_back(std::move(all[i]));
    }
  }
  return ds;
}

inline std::vector<ClientDataset> generate_with_specs(
    const std::vector<DepartmentSpec>& specs, std::size_t per_client_n,
    std::uint64_t seed, const DataDims& dims = {}) {
  if (per_client_n < 30) {
    throw config_error("synthdata: per_client_n must be >= 30, got " +
                       std::to_string(per_client_n));
  }
  std::vector<ClientDataset> out;
  out.reserve(specs.size());
  for (std::size_t t = 0; t < specs.size(); ++t) {
    auto instances = generate_client(specs[t], per_client_n, Rng::mix(seed, t), dims);
    out.push_back(split_dataset(std::move(instances)));
  }
  return out;
}

/// Deterministic heterogeneous partitions for T clients.
inline std::vector<ClientDataset> generate(std::size_t clients, std::size_t per_client_n,
                                           std::uint64_t seed, const DataDims& dims = {},
                                           double noise_sigma = 0.05) {
  if (clients > kFamilyCount * kVariantsPerFamily) {
    throw config_error("synthdata: " + std::to_string(clients) + " clients exceeds " +
                       std::to_string(kFamilyCount * kVariantsPerFamily) +
                       " family/variant combinations");
  }
  std::vector<DepartmentSpec> specs;
  specs.reserve(clients);
  for (std::size_t t = 0; t < clients; ++t) {
    specs.push_back(department_for_client(t, noise_sigma));
  }
  return generate_with_specs(specs, per_client_n, seed, dims);
}

// ----------------------------------------------------------- dump / load

inline nlohmann::json instance_to_json(const VQAInstance& inst) {
  nlohmann::json j;
  j["image"] = inst.image.values();
  j["side"] = inst.image.rows();
  j["question"] = inst.question;
  j["answer"] = inst.answer;
  j["type"] = inst.type == QuestionType::closed ? "closed" : "open";
  return j;
}

inline VQAInstance instance_from_json(const nlohmann::json& j) {
  VQAInstance inst;
  const std::size_t side = j.at("side").get<std::size_t>();
  inst.image = Tensor(side, side, j.at("image").get<std::vector<double>>());
  inst.question = j.at("question").get<std::vector<int>>();
  inst.answer = j.at("answer").get<int>();
  inst.type = j.at("type").get<std::string>() == "closed" ? QuestionType::closed
                                                          : QuestionType::open;
  return inst;
}

/// One JSON object per line: {client, split, image, side, question, answer, type}.
inline std::string datasets_to_jsonl(const std::vector<ClientDataset>& data) {
  std::string out;
  for (std::size_t t = 0; t < data.size(); ++t) {
    auto emit = [&](const std::vector<VQAInstance>& split, const char* name) {
      for (const auto& inst : split) {
        nlohmann::json j = instance_to_json(inst);
        j["client"] = t;
        j["split"] = name;
        out += j.dump();
        out += '\n';
      }
    };
    emit(data[t].train, "train");
    emit(data[t].eval, "eval");
    emit(data[t].test, "test");
  }
  return out;
}

inline std::vector<ClientDataset> datasets_from_jsonl(const std::string& text) {
  std::vector<ClientDataset> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    if (end > pos) {
      nlohmann::json j = nlohmann::json::parse(text.substr(pos, end - pos));
      const std::size_t t = j.at("client").get<std::size_t>();
      if (out.size() <= t) out.resize(t + 1);
      const std::string split = j.at("split").get<std::string>();
      VQAInstance inst = instance_from_json(j);
      if (split == "train") {
        out[t].train.push_back(std::move(inst));
      } else if (split == "eval") {
        out[t].eval.push_back(std::move(inst));
      } else {
        out[t].test.push_back(std::move(inst));
      }
    }
    pos = end + 1;
  }
  return out;
}

}  // namespace evifed

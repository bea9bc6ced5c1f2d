#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "kse/error.hpp"
#include "kse/model.hpp"
#include "kse/rng.hpp"
#include "kse/transform.hpp"

namespace kse {

/// One key and the sub-model trained on images encrypted with it.
struct Member {
  ShuffleKey key;
  Mlp model;
};

struct Prediction {
  std::vector<double> probs;
  std::size_t argmax_class = 0;
  std::vector<std::size_t> selected;  // member indices that contributed
};

/// Logits of `member` for a ciphertext. Refuses ciphertexts produced under a
/// different key.
inline std::vector<double> route(const Member& member, const Ciphertext& ct) {
  if (ct.key_id != member.model.key_id)
    throw Error(Errc::invalid_argument, "ciphertext key '" + ct.key_id + "' routed to model '" + member.model.key_id + "'");
  return forward(member.model, ct.image.flat());
}

inline std::vector<double> member_probs(const Member& member, const Image& x) {
  return softmax(route(member, seal(x, member.key)));
}

/// Arithmetic mean of the softmax outputs of members[idx] for idx in `which`,
/// summed in the given order.
inline Prediction average_members(std::span<const Member> members, std::span<const std::size_t> which, const Image& x) {
  Prediction p;
  for (std::size_t idx : which) {
    const auto probs = member_probs(members[idx], x);
    if (p.probs.empty()) p.probs.assign(probs.size(), 0.0);
    for (std::size_t k = 0; k < probs.size(); ++k) p.probs[k] += probs[k];
  }
  const double inv = 1.0 / static_cast<double>(which.size());
  for (double& v : p.probs) v *= inv;
  p.argmax_class = argmax(p.probs);
  p.selected.assign(which.begin(), which.end());
  return p;
}

/// N key-matched sub-models with a fixed selection size S (3 <= S <= N, N >= 4).
class RandomEnsemble {
 public:
  static constexpr std::size_t min_members = 4;
  static constexpr std::size_t min_selection = 3;

  RandomEnsemble(std::vector<Member> members, std::size_t selection_size, std::uint64_t rng_seed = 0)
      : members_(std::move(members)), selection_size_(selection_size), rng_seed_(rng_seed) {
    validate();
  }

  const std::vector<Member>& members() const noexcept { return members_; }
  std::size_t size() const noexcept { return members_.size(); }
  std::size_t selection_size() const noexcept { return selection_size_; }
  std::uint64_t rng_seed() const noexcept { return rng_seed_; }
  std::size_t num_classes() const { return members_.front().model.num_classes(); }

  /// Fresh selection stream for a caller; the ensemble holds no mutable state.
  RngStream selection_stream(std::string_view label = "select") const { return RngStream(rng_seed_).derive(label); }

 private:
  void validate() const {
    const std::size_t n = members_.size();
    if (n < min_members) throw Error(Errc::invalid_n_or_s, "need N >= 4 members");
    if (selection_size_ < min_selection || selection_size_ > n) throw Error(Errc::invalid_n_or_s, "need 3 <= S <= N");
    std::set<std::uint64_t> seeds;
    for (const auto& m : members_) {
      if (m.model.key_id != m.key.key_id()) throw Error(Errc::invalid_argument, "member model not bound to its key");
      if (!seeds.insert(m.key.seed()).second) throw Error(Errc::duplicate_seeds, "member keys must have distinct seeds");
      if (m.model.input_dim() != members_.front().model.input_dim() ||
          m.model.num_classes() != members_.front().model.num_classes())
        throw Error(Errc::shape_mismatch, "members disagree on input or output size");
    }
  }

  std::vector<Member> members_;
  std::size_t selection_size_;
  std::uint64_t rng_seed_;
};

inline void check_ensemble_input(const RandomEnsemble& e, const Image& x) {
  if (x.size() != e.members().front().model.input_dim())
    throw Error(Errc::shape_mismatch, "image size differs from the ensemble's training shape");
}

/// Random-subset inference: encrypt x under every member key, route each
/// ciphertext to its own sub-model, pick S of the N results uniformly
/// without replacement and average their softmax vectors.
inline Prediction predict_random(const RandomEnsemble& e, const Image& x, RngStream& rng) {
  check_ensemble_input(e, x);
  const auto which = uniform_subset(rng, e.size(), e.selection_size());
  return average_members(e.members(), which, x);
}

inline Prediction predict_simple(const RandomEnsemble& e, const Image& x) {
  check_ensemble_input(e, x);
  std::vector<std::size_t> all(e.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return average_members(e.members(), all, x);
}

inline Prediction predict_single(const RandomEnsemble& e, std::size_t member_index, const Image& x) {
  if (member_index >= e.size()) throw Error(Errc::index_out_of_range, "member index");
  check_ensemble_input(e, x);
  const std::size_t which[] = {member_index};
  return average_members(e.members(), which, x);
}

/// Trains one sub-model per seed, each on the dataset encrypted with its own key.
inline RandomEnsemble build_ensemble(const Dataset& data, std::size_t n, std::size_t s,
                                     std::span<const std::uint64_t> key_seeds, const TrainConfig& cfg,
                                     std::size_t block_size, std::uint64_t selection_seed = 0,
                                     const std::function<void(std::size_t, const EpochRecord&)>& log = {}) {
  if (n < RandomEnsemble::min_members || s < RandomEnsemble::min_selection || s > n)
    throw Error(Errc::invalid_n_or_s, "need N >= 4 and 3 <= S <= N");
  if (key_seeds.size() != n) throw Error(Errc::invalid_n_or_s, "need exactly N key seeds");
  if (std::set<std::uint64_t>(key_seeds.begin(), key_seeds.end()).size() != n)
    throw Error(Errc::duplicate_seeds, "key seeds must be distinct");
  data.validate();
  if (data.empty()) throw Error(Errc::shape_mismatch, "empty training set");

  std::vector<Member> members;
  for (std::size_t i = 0; i < n; ++i) {
    ShuffleKey key = gen_key(key_seeds[i], block_size, data.images.front().channels);
    TrainConfig member_cfg = cfg;
    member_cfg.rng_seed = RngStream(cfg.rng_seed).derive("member/" + std::to_string(key_seeds[i])).seed();
    TrainLogger member_log;
    if (log) member_log = [&log, i](const EpochRecord& r) { log(i, r); };
    Mlp model = train_submodel(data, key, member_cfg, member_log);
    members.push_back(Member{std::move(key), std::move(model)});
  }
  return RandomEnsemble(std::move(members), s, selection_seed);
}

// ---------------------------------------------------------------------------
// Manifest: JSON document listing key seeds, checkpoint paths and (N, S).
// Relative checkpoint paths resolve against the manifest's directory.

inline constexpr int manifest_version = 1;

inline nlohmann::json manifest_json(const RandomEnsemble& e, std::span<const std::string> checkpoints,
                                    const std::optional<std::string>& baseline_checkpoint = std::nullopt) {
  if (checkpoints.size() != e.size()) throw Error(Errc::invalid_argument, "one checkpoint path per member");
  nlohmann::json j;
  j["format"] = "kse-ensemble-manifest";
  j["version"] = manifest_version;
  j["n"] = e.size();
  j["s"] = e.selection_size();
  j["selection_seed"] = e.rng_seed();
  j["members"] = nlohmann::json::array();
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto& key = e.members()[i].key;
    j["members"].push_back({{"seed", key.seed()},
                            {"block_size", key.block_size()},
                            {"channels", key.channels()},
                            {"key_id", key.key_id()},
                            {"checkpoint", checkpoints[i]}});
  }
  if (baseline_checkpoint) j["baseline"] = {{"key", "identity"}, {"checkpoint", *baseline_checkpoint}};
  return j;
}

struct LoadedManifest {
  RandomEnsemble ensemble;
  std::optional<Member> baseline;
};

inline LoadedManifest load_manifest(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::invalid_config, std::string("manifest parse error: ") + ex.what());
  }
  try {
    if (j.at("format") != "kse-ensemble-manifest") throw Error(Errc::bad_magic, "not an ensemble manifest");
    if (j.at("version").get<int>() != manifest_version) throw Error(Errc::version_mismatch, "manifest version");
    const auto base = path.parent_path();
    auto resolve = [&base](const std::string& p) {
      const std::filesystem::path fp(p);
      return fp.is_absolute() ? fp : base / fp;
    };
    std::vector<Member> members;
    for (const auto& m : j.at("members")) {
      ShuffleKey key = gen_key(m.at("seed").get<std::uint64_t>(), m.at("block_size").get<std::size_t>(),
                               m.at("channels").get<std::size_t>());
      if (m.contains("key_id") && m.at("key_id").get<std::string>() != key.key_id())
        throw Error(Errc::invalid_config, "manifest key_id does not match its seed");
      Mlp model = load_model(resolve(m.at("checkpoint").get<std::string>()));
      members.push_back(Member{std::move(key), std::move(model)});
    }
    if (members.size() != j.at("n").get<std::size_t>()) throw Error(Errc::invalid_n_or_s, "member count differs from n");
    RandomEnsemble e(std::move(members), j.at("s").get<std::size_t>(), j.value("selection_seed", std::uint64_t{0}));
    std::optional<Member> baseline;
    if (j.contains("baseline")) {
      const auto& first = e.members().front().key;
      Mlp model = load_model(resolve(j["baseline"].at("checkpoint").get<std::string>()));
      baseline = Member{identity_key(first.block_size(), first.channels()), std::move(model)};
    }
    return {std::move(e), std::move(baseline)};
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::invalid_config, std::string("manifest schema error: ") + ex.what());
  }
}

}  // namespace kse

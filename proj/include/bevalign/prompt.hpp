#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevalign/params.hpp"
#include "bevalign/random.hpp"
#include "bevalign/tensor.hpp"

namespace bevalign {

// One adapter per normalization site: a one-hidden-layer MLP mapping the
// active dataset prompt to that site's (alpha, beta) pair.
struct AdapterParams {
  Tensor w1, b1, w2, b2;
  std::size_t feature_width = 0;
};

// Dataset prompts plus per-site adapters. Disabled registries degrade
// every prompt_norm call to plain layer normalization.
class PromptRegistry {
public:
  bool enabled = true;
  std::size_t prompt_dim = 16;
  std::uint64_t init_seed = 0x70726f6d7074ULL;

  std::size_t hidden_width() const { return 2 * prompt_dim; }

  // Registration seeds its own streams from the entry name, never from a
  // shared generator: turning the registry on or off cannot perturb
  // backbone initialization under the same model seed.
  //
  // Prompt vectors start from a unit Gaussian; adapters start with zero
  // output (w2 = b2 = 0, alpha offset +1) so an untrained registry is an
  // exact no-op on the network.
  Tensor register_dataset(ParameterStore& store, const std::string& dataset_id) {
    if (prompts_.count(dataset_id)) {
      throw std::logic_error("prompt registry: dataset already registered: " + dataset_id);
    }
    Rng rng(mix_seed(init_seed, hash_string("dataset/" + dataset_id)));
    Tensor r = store.create_normal("prompt/" + dataset_id, ParamGroup::prompts, 1, prompt_dim,
                                   rng, 1.0);
    prompts_.emplace(dataset_id, r);
    return r;
  }

  AdapterParams register_site(ParameterStore& store, const std::string& site_id,
                              std::size_t feature_width) {
    if (adapters_.count(site_id)) {
      throw std::logic_error("prompt registry: site already registered: " + site_id);
    }
    Rng rng(mix_seed(init_seed, hash_string("site/" + site_id)));
    const std::size_t h = hidden_width();
    AdapterParams a;
    a.feature_width = feature_width;
    const std::string base = "adapter/" + site_id + "/";
    a.w1 = store.create_normal(base + "w1", ParamGroup::adapters, prompt_dim, h, rng,
                               1.0 / std::sqrt(static_cast<double>(prompt_dim)));
    a.b1 = store.create_zeros(base + "b1", ParamGroup::adapters, 1, h);
    a.w2 = store.create_zeros(base + "w2", ParamGroup::adapters, h, 2 * feature_width);
    a.b2 = store.create_zeros(base + "b2", ParamGroup::adapters, 1, 2 * feature_width);
    adapters_.emplace(site_id, a);
    return a;
  }

  bool has_dataset(const std::string& id) const { return prompts_.count(id) != 0; }
  bool has_site(const std::string& id) const { return adapters_.count(id) != 0; }

  Tensor prompt(const std::string& dataset_id) const {
    auto it = prompts_.find(dataset_id);
    if (it == prompts_.end()) {
      throw std::out_of_range("prompt registry: unknown dataset: " + dataset_id);
    }
    return it->second;
  }

  const AdapterParams& adapter(const std::string& site_id) const {
    auto it = adapters_.find(site_id);
    if (it == adapters_.end()) {
      throw std::out_of_range("prompt registry: unknown norm site: " + site_id);
    }
    return it->second;
  }

  // Install or overwrite a prompt vector directly (fine-tune strategies).
  // Standalone tensors are fine here: fine-tuning freezes prompts, so
  // they need not live in an optimizer's store.
  void set_prompt(const std::string& dataset_id, const std::vector<double>& values) {
    if (values.size() != prompt_dim) {
      throw std::invalid_argument("set_prompt: wrong prompt width");
    }
    auto it = prompts_.find(dataset_id);
    if (it == prompts_.end()) {
      prompts_.emplace(dataset_id, Tensor::from_values(1, prompt_dim, values, true));
    } else {
      it->second.mutable_values() = values;
    }
  }

  std::vector<std::string> dataset_ids() const {
    std::vector<std::string> out;
    for (const auto& [id, t] : prompts_) out.push_back(id);
    return out;
  }

  std::vector<std::string> site_ids() const {
    std::vector<std::string> out;
    for (const auto& [id, a] : adapters_) out.push_back(id);
    return out;
  }

  std::size_t site_count() const { return adapters_.size(); }

private:
  std::map<std::string, Tensor> prompts_;
  std::map<std::string, AdapterParams> adapters_;
};

// Per-forward tally of how tokens were normalized; the structural audit
// asserts no plain sites remain in the backbones when prompts are on.
struct NormStats {
  std::size_t prompted_calls = 0;
  std::size_t plain_calls = 0;
  std::set<std::string> sites_used;
};

struct NormContext {
  const PromptRegistry* registry = nullptr;  // null behaves as disabled
  std::optional<std::string> dataset;
  NormStats* stats = nullptr;
};

inline std::pair<Tensor, Tensor> adapter_forward(Tape& tape, const PromptRegistry& reg,
                                                 const std::string& site_id, Tensor prompt) {
  const AdapterParams& a = reg.adapter(site_id);
  if (prompt.rows() != 1 || prompt.cols() != reg.prompt_dim) {
    throw std::invalid_argument("adapter_forward: prompt width mismatch");
  }
  Tensor h = gelu(tape, add_rowwise(tape, matmul(tape, prompt, a.w1), a.b1));
  Tensor raw = add_rowwise(tape, matmul(tape, h, a.w2), a.b2);
  const std::size_t d = a.feature_width;
  Tensor alpha = add_scalar(tape, slice_cols(tape, raw, 0, d), 1.0);
  Tensor beta = slice_cols(tape, raw, d, 2 * d);
  return {alpha, beta};
}

// alpha * layer_norm(x) + beta, with (alpha, beta) produced from the
// sample's dataset prompt. Falls back to plain layer_norm when prompts
// are off.
inline Tensor prompt_norm(Tape& tape, Tensor x, const std::string& site_id,
                          const NormContext& ctx) {
  if (ctx.registry == nullptr || !ctx.registry->enabled) {
    if (ctx.stats) ++ctx.stats->plain_calls;
    return layer_norm(tape, x);
  }
  if (!ctx.dataset) {
    throw std::invalid_argument("prompt_norm: no dataset context while prompts enabled");
  }
  Tensor r = ctx.registry->prompt(*ctx.dataset);
  auto [alpha, beta] = adapter_forward(tape, *ctx.registry, site_id, r);
  if (ctx.stats) {
    ++ctx.stats->prompted_calls;
    ctx.stats->sites_used.insert(site_id);
  }
  return add_rowwise(tape, mul_rowwise(tape, layer_norm(tape, x), alpha), beta);
}

// Validates that every sample in a batch can activate a prompt. Returns
// the per-sample contexts (the ids themselves).
inline std::vector<std::optional<std::string>> resolve_prompts(
    const PromptRegistry& reg, const std::vector<std::string>& dataset_ids) {
  std::vector<std::optional<std::string>> out;
  out.reserve(dataset_ids.size());
  for (const auto& id : dataset_ids) {
    if (!reg.enabled) {
      out.emplace_back(std::nullopt);
      continue;
    }
    if (id.empty()) throw std::invalid_argument("resolve_prompts: sample without dataset id");
    if (!reg.has_dataset(id)) {
      throw std::out_of_range("resolve_prompts: no prompt for dataset: " + id);
    }
    out.emplace_back(id);
  }
  return out;
}

enum class PromptStrategy { correspond, wrong, random, none };

inline const char* prompt_strategy_name(PromptStrategy s) {
  switch (s) {
    case PromptStrategy::correspond: return "correspond";
    case PromptStrategy::wrong: return "wrong";
    case PromptStrategy::random: return "random";
    case PromptStrategy::none: return "none";
  }
  throw std::logic_error("prompt_strategy_name: unknown strategy");
}

inline std::optional<PromptStrategy> prompt_strategy_from_name(const std::string& s) {
  if (s == "correspond") return PromptStrategy::correspond;
  if (s == "wrong") return PromptStrategy::wrong;
  if (s == "random") return PromptStrategy::random;
  if (s == "none") return PromptStrategy::none;
  return std::nullopt;
}

// Chooses the prompt used while fine-tuning on `finetune_dataset`:
// correspond/wrong copy a stored prompt (the matching one or a different
// dataset's), random draws a fresh seeded vector, none turns the
// registry off. Returns the context id to use, or nullopt for none.
inline std::optional<std::string> init_finetune_prompt(PromptRegistry& reg,
                                                       const std::string& finetune_dataset,
                                                       PromptStrategy strategy,
                                                       const std::string& source_dataset = "",
                                                       std::uint64_t seed = 0) {
  switch (strategy) {
    case PromptStrategy::correspond: {
      const std::string& src = source_dataset.empty() ? finetune_dataset : source_dataset;
      reg.set_prompt(finetune_dataset, reg.prompt(src).values());
      return finetune_dataset;
    }
    case PromptStrategy::wrong: {
      if (source_dataset.empty() || source_dataset == finetune_dataset) {
        throw std::invalid_argument("init_finetune_prompt: wrong strategy needs another dataset");
      }
      reg.set_prompt(finetune_dataset, reg.prompt(source_dataset).values());
      return finetune_dataset;
    }
    case PromptStrategy::random: {
      Rng rng(mix_seed(seed, 0x9b0a));
      reg.set_prompt(finetune_dataset, random_normal_values(rng, reg.prompt_dim, 1.0));
      return finetune_dataset;
    }
    case PromptStrategy::none:
      reg.enabled = false;
      return std::nullopt;
  }
  throw std::logic_error("init_finetune_prompt: unknown strategy");
}

struct NormAudit {
  std::size_t adapter_sites = 0;
  std::size_t sites_used = 0;
  std::size_t plain_calls = 0;
  std::vector<std::string> unregistered_sites;
  bool ok = false;
};

// Compares the norm sites a forward pass actually touched against the
// registry. Passing requires prompt-routed coverage of every adapter
// site and zero plain normalizations.
inline NormAudit audit_norms(const PromptRegistry& reg, const NormStats& stats) {
  NormAudit audit;
  audit.adapter_sites = reg.site_count();
  audit.sites_used = stats.sites_used.size();
  audit.plain_calls = stats.plain_calls;
  for (const auto& site : stats.sites_used) {
    if (!reg.has_site(site)) audit.unregistered_sites.push_back(site);
  }
  audit.ok = audit.plain_calls == 0 && audit.unregistered_sites.empty() &&
             audit.sites_used == audit.adapter_sites;
  return audit;
}

}  // namespace bevalign

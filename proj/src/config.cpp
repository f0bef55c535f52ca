#include "ff/config.hpp"

#include <functional>
#include <map>
#include <stdexcept>
#include <string>

namespace ff {

using nlohmann::json;

namespace {

template <typename T>
T get_as(const json& value, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!value.is_boolean()) throw std::invalid_argument("expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!value.is_number_integer() || (std::is_unsigned_v<T> && value.get<std::int64_t>() < 0))
        throw std::invalid_argument("expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!value.is_number()) throw std::invalid_argument("expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!value.is_string()) throw std::invalid_argument("expected a string");
    }
    return value.get<T>();
  } catch (const std::exception& e) {
    throw std::invalid_argument("config key '" + key + "': " + e.what());
  }
}

template <typename Target>
using Setter = std::function<void(Target&, const json&, const std::string&)>;

template <typename Target, typename T>
Setter<Target> field(T Target::*member) {
  return [member](Target& t, const json& v, const std::string& key) { t.*member = get_as<T>(v, key); };
}

const std::map<std::string, Setter<GoodnessParams>>& goodness_fields() {
  static const std::map<std::string, Setter<GoodnessParams>> fields{
      {"delta", field(&GoodnessParams::delta)},
      {"temperature", field(&GoodnessParams::temperature)},
      {"trim_fraction", field(&GoodnessParams::trim_fraction)},
      {"oja_alpha", field(&GoodnessParams::oja_alpha)},
      {"bcm_lambda", field(&GoodnessParams::bcm_lambda)},
      {"infonce_weight", field(&GoodnessParams::infonce_weight)},
      {"pc_lambda", field(&GoodnessParams::pc_lambda)},
      {"ntxent_tau", field(&GoodnessParams::ntxent_tau)},
      {"decorr_lambda", field(&GoodnessParams::decorr_lambda)},
      {"fractal_weight", field(&GoodnessParams::fractal_weight)},
      {"l1_lambda", field(&GoodnessParams::l1_lambda)},
      {"triplet_weight", field(&GoodnessParams::triplet_weight)},
      {"pca_k", field(&GoodnessParams::pca_k)},
      {"epsilon", field(&GoodnessParams::epsilon)},
      {"decay", field(&GoodnessParams::decay)},
      {"power_iters", field(&GoodnessParams::power_iters)},
      {"newton_schulz_iters", field(&GoodnessParams::newton_schulz_iters)},
  };
  return fields;
}

const std::map<std::string, Setter<FFConfig>>& ff_fields() {
  static const std::map<std::string, Setter<FFConfig>> fields{
      {"layer_sizes",
       [](FFConfig& c, const json& v, const std::string& key) {
         if (!v.is_array()) throw std::invalid_argument("config key '" + key + "': expected an array");
         c.layer_sizes.clear();
         for (const auto& e : v) c.layer_sizes.push_back(get_as<std::size_t>(e, key));
       }},
      {"threshold", field(&FFConfig::threshold)},
      {"learning_rate", field(&FFConfig::learning_rate)},
      {"weight_decay", field(&FFConfig::weight_decay)},
      {"beta1", field(&FFConfig::beta1)},
      {"beta2", field(&FFConfig::beta2)},
      {"adam_epsilon", field(&FFConfig::adam_epsilon)},
      {"batch_size", field(&FFConfig::batch_size)},
      {"epochs", field(&FFConfig::epochs)},
      {"peer_coeff", field(&FFConfig::peer_coeff)},
      {"peer_decay", field(&FFConfig::peer_decay)},
      {"goodness", field(&FFConfig::goodness)},
      {"goodness_params",
       [](FFConfig& c, const json& v, const std::string& key) {
         if (!v.is_object()) throw std::invalid_argument("config key '" + key + "': expected a table");
         c.goodness_params = goodness_params_from_json(v, c.goodness_params);
       }},
      {"seed", field(&FFConfig::seed)},
      {"length_normalize_between_layers", field(&FFConfig::length_normalize_between_layers)},
      {"init_goodness", field(&FFConfig::init_goodness)},
      {"multipass_first_layer", field(&FFConfig::multipass_first_layer)},
      {"eval_subset", field(&FFConfig::eval_subset)},
      {"probe_epochs", field(&FFConfig::probe_epochs)},
      {"probe_learning_rate", field(&FFConfig::probe_learning_rate)},
      {"probe_batch_size", field(&FFConfig::probe_batch_size)},
      {"probe_every_epoch", field(&FFConfig::probe_every_epoch)},
  };
  return fields;
}

template <typename Target>
Target apply(const json& j, Target base, const std::map<std::string, Setter<Target>>& fields, const char* what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = fields.find(key);
    if (it == fields.end()) throw std::invalid_argument("unknown " + std::string(what) + " key '" + key + "'");
    it->second(base, value, key);
  }
  return base;
}

}  // namespace

json to_json(const GoodnessParams& p) {
  return json{{"delta", p.delta},
              {"temperature", p.temperature},
              {"trim_fraction", p.trim_fraction},
              {"oja_alpha", p.oja_alpha},
              {"bcm_lambda", p.bcm_lambda},
              {"infonce_weight", p.infonce_weight},
              {"pc_lambda", p.pc_lambda},
              {"ntxent_tau", p.ntxent_tau},
              {"decorr_lambda", p.decorr_lambda},
              {"fractal_weight", p.fractal_weight},
              {"l1_lambda", p.l1_lambda},
              {"triplet_weight", p.triplet_weight},
              {"pca_k", p.pca_k},
              {"epsilon", p.epsilon},
              {"decay", p.decay},
              {"power_iters", p.power_iters},
              {"newton_schulz_iters", p.newton_schulz_iters}};
}

json to_json(const FFConfig& c) {
  return json{{"layer_sizes", c.layer_sizes},
              {"threshold", c.threshold},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_epsilon", c.adam_epsilon},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"peer_coeff", c.peer_coeff},
              {"peer_decay", c.peer_decay},
              {"goodness", c.goodness},
              {"goodness_params", to_json(c.goodness_params)},
              {"seed", c.seed},
              {"length_normalize_between_layers", c.length_normalize_between_layers},
              {"init_goodness", c.init_goodness},
              {"multipass_first_layer", c.multipass_first_layer},
              {"eval_subset", c.eval_subset},
              {"probe_epochs", c.probe_epochs},
              {"probe_learning_rate", c.probe_learning_rate},
              {"probe_batch_size", c.probe_batch_size},
              {"probe_every_epoch", c.probe_every_epoch}};
}

GoodnessParams goodness_params_from_json(const json& j, GoodnessParams base) {
  return apply(j, base, goodness_fields(), "goodness_params");
}

FFConfig ff_config_from_json(const json& j, FFConfig base) { return apply(j, base, ff_fields(), "engine config"); }

}  // namespace ff

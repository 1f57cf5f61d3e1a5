#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "receler/attack.hpp"
#include "receler/backbone_train.hpp"
#include "receler/dataset.hpp"
#include "receler/detector.hpp"
#include "receler/evaluation.hpp"
#include "receler/receler_train.hpp"

namespace receler {

// ---- strict key validation --------------------------------------------------

struct KeyTree {
    std::set<std::string> leaves;
    std::map<std::string, KeyTree> children;
    const KeyTree* array_item = nullptr;  // schema applied to each element
};

inline void validate_keys(const Json& j, const KeyTree& tree, const std::string& path) {
    if (j.is_array() && tree.array_item) {
        int i = 0;
        for (const auto& el : j) validate_keys(el, *tree.array_item, path + "[" + std::to_string(i++) + "]");
        return;
    }
    if (!j.is_object()) return;
    for (const auto& [key, val] : j.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        if (tree.leaves.count(key)) continue;
        auto it = tree.children.find(key);
        if (it == tree.children.end()) throw std::invalid_argument("unknown config key: " + here);
        validate_keys(val, it->second, here);
    }
}

// Apply "a.b.c=value" style overrides; values parse as JSON scalars with a
// string fallback.
inline void apply_dotted_override(Json& root, const std::string& dotted, const std::string& value) {
    Json* cur = &root;
    std::string rest = dotted;
    size_t pos;
    while ((pos = rest.find('.')) != std::string::npos) {
        const std::string head = rest.substr(0, pos);
        rest = rest.substr(pos + 1);
        if (!cur->contains(head) || !(*cur)[head].is_object()) (*cur)[head] = Json::object();
        cur = &(*cur)[head];
    }
    Json parsed = Json::parse(value, nullptr, /*allow_exceptions=*/false);
    (*cur)[rest] = parsed.is_discarded() ? Json(value) : parsed;
}

// ---- resolved run configuration ---------------------------------------------

struct DatasetConfig {
    int n_per_concept = 500;
    int image_size = 32;
    double heldout_fraction = 0.1;
    double canonical_fraction = 0.5;
    std::vector<ConceptSpec> concepts = default_concepts();
};

struct BackboneConfig {
    std::string data_dir;
    UNetLayout layout;
    int num_train_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    BackboneTrainConfig train;
    std::string detector_dir;  // optional: run the sample-quality gate after training
    int gate_samples = 100;
    GuidanceConfig gate_guidance;
};

struct DetectorConfig {
    std::string data_dir;
    DetectorTrainConfig train;
};

struct RecelerConfig {
    std::string backbone_dir;
    std::string detector_dir;
    std::string gate_report;  // reuse a prior gate result (hash-checked)
    int gate_samples = 100;
    double gate_threshold = 0.85;
    std::string concept_token;
    TrainSchedule schedule;
    GuidanceConfig guidance;
};

struct AttackCliConfig {
    std::string backbone_dir;
    std::string eraser_dir;
    std::string detector_dir;
    std::string concept_token;  // defaults to the eraser's concept
    AttackConfig attack;
};

struct EvalCliConfig {
    std::string backbone_dir;
    std::string detector_dir;
    std::string eraser_dir;   // empty: evaluate the plain backbone
    std::string dataset_dir;  // provides specs/aliases
    std::string concept_token;
    EvalConfig eval;
    std::string gate_report;
    int gate_samples = 100;
    double backbone_gate = 0.85;
    bool check_backbone_gate = true;
};

struct ComposeConfig {
    std::vector<std::string> eraser_dirs;
};

struct SampleConfig {
    std::string backbone_dir;
    std::string eraser_dir;
    std::string adv_prompt_dir;
    std::vector<std::string> prompt;
    int count = 4;
    int stop_at_t = 0;
    GuidanceConfig guidance;
};

struct RunConfig {
    uint64_t seed = 0;
    DatasetConfig dataset;
    BackboneConfig backbone;
    DetectorConfig detector;
    RecelerConfig receler;
    AttackCliConfig attack;
    EvalCliConfig eval;
    ComposeConfig compose_cfg;
    SampleConfig sample;

    static const KeyTree& schema() {
        static const KeyTree tree = [] {
            KeyTree t;
            t.leaves = {"seed"};
            static KeyTree concept_item;
            concept_item.leaves = {"canonical", "aliases", "shape", "color",
                                   "min_half",  "max_half", "center_jitter", "color_jitter"};
            KeyTree dataset;
            dataset.leaves = {"n_per_concept", "image_size", "heldout_fraction", "canonical_fraction"};
            KeyTree concepts;
            concepts.array_item = &concept_item;
            dataset.children["concepts"] = concepts;
            t.children["dataset"] = dataset;

            KeyTree guidance;
            guidance.leaves = {"eta", "cfg_scale", "ddim_steps"};

            KeyTree backbone;
            backbone.leaves = {"data_dir",  "num_train_steps", "beta_start", "beta_end",
                               "steps",     "batch",           "lr",         "warmup",
                               "final_lr_fraction", "p_uncond", "log_every",  "detector_dir",
                               "gate_samples"};
            KeyTree layout;
            layout.leaves = {"image_size", "image_channels", "base_channels", "channel_mult",
                             "embed_dim",  "heads",          "time_dim",      "norm_groups"};
            backbone.children["layout"] = layout;
            backbone.children["gate_guidance"] = guidance;
            t.children["backbone"] = backbone;

            KeyTree detector;
            detector.leaves = {"data_dir", "steps",         "batch",          "lr",
                               "noise_aug", "shift_aug",    "none_fraction",  "gate_threshold",
                               "log_every"};
            t.children["detector"] = detector;

            KeyTree receler_s;
            receler_s.leaves = {"backbone_dir", "detector_dir", "gate_report", "gate_samples",
                                "gate_threshold", "concept",    "rounds",      "eraser_steps_per_round",
                                "adversary_steps_per_round",    "lambda_reg",  "tau",
                                "adv_tokens",   "batch",        "sample_ddim_steps", "sample_cfg",
                                "t_band_lo",    "t_band_hi",    "eraser_lr",   "adv_lr",
                                "grid_every"};
            receler_s.children["guidance"] = guidance;
            t.children["receler"] = receler_s;

            KeyTree attack;
            attack.leaves = {"backbone_dir", "eraser_dir", "detector_dir", "concept",
                             "k",            "steps",      "pool_refresh", "lr",
                             "batch",        "sample_ddim_steps", "sample_cfg",
                             "t_band_lo",    "t_band_hi",  "num_eval_samples"};
            attack.children["guidance"] = guidance;
            t.children["attack"] = attack;

            KeyTree eval;
            eval.leaves = {"backbone_dir", "detector_dir", "eraser_dir", "dataset_dir",
                           "concept",      "n_efficacy",   "n_robustness", "n_locality_per_class",
                           "scale",        "emit_plots",   "detector_gate", "gate_report",
                           "gate_samples", "backbone_gate", "check_backbone_gate"};
            eval.children["guidance"] = guidance;
            t.children["eval"] = eval;

            KeyTree compose_t;
            compose_t.leaves = {"eraser_dirs"};
            t.children["compose"] = compose_t;

            KeyTree sample;
            sample.leaves = {"backbone_dir", "eraser_dir", "adv_prompt_dir", "prompt", "count", "stop_at_t"};
            sample.children["guidance"] = guidance;
            t.children["sample"] = sample;
            return t;
        }();
        return tree;
    }

    static RunConfig from_json(const Json& j) {
        validate_keys(j, schema(), "");
        RunConfig c;
        c.seed = j.value("seed", c.seed);

        if (j.contains("dataset")) {
            const Json& d = j.at("dataset");
            c.dataset.n_per_concept = d.value("n_per_concept", c.dataset.n_per_concept);
            c.dataset.image_size = d.value("image_size", c.dataset.image_size);
            c.dataset.heldout_fraction = d.value("heldout_fraction", c.dataset.heldout_fraction);
            c.dataset.canonical_fraction = d.value("canonical_fraction", c.dataset.canonical_fraction);
            if (d.contains("concepts")) {
                c.dataset.concepts.clear();
                for (const auto& sj : d.at("concepts")) c.dataset.concepts.push_back(ConceptSpec::from_json(sj));
            }
        }
        if (j.contains("backbone")) {
            const Json& b = j.at("backbone");
            c.backbone.data_dir = b.value("data_dir", "");
            if (b.contains("layout")) {
                Json lj = c.backbone.layout.to_json();
                lj.update(b.at("layout"));
                c.backbone.layout = UNetLayout::from_json(lj);
            }
            c.backbone.num_train_steps = b.value("num_train_steps", c.backbone.num_train_steps);
            c.backbone.beta_start = b.value("beta_start", c.backbone.beta_start);
            c.backbone.beta_end = b.value("beta_end", c.backbone.beta_end);
            c.backbone.train.steps = b.value("steps", c.backbone.train.steps);
            c.backbone.train.batch = b.value("batch", c.backbone.train.batch);
            c.backbone.train.lr = b.value("lr", c.backbone.train.lr);
            c.backbone.train.warmup = b.value("warmup", c.backbone.train.warmup);
            c.backbone.train.final_lr_fraction = b.value("final_lr_fraction", c.backbone.train.final_lr_fraction);
            c.backbone.train.p_uncond = b.value("p_uncond", c.backbone.train.p_uncond);
            c.backbone.train.log_every = b.value("log_every", c.backbone.train.log_every);
            c.backbone.detector_dir = b.value("detector_dir", "");
            c.backbone.gate_samples = b.value("gate_samples", c.backbone.gate_samples);
            if (b.contains("gate_guidance")) c.backbone.gate_guidance = GuidanceConfig::from_json(b.at("gate_guidance"));
        }
        if (j.contains("detector")) {
            const Json& d = j.at("detector");
            c.detector.data_dir = d.value("data_dir", "");
            c.detector.train.steps = d.value("steps", c.detector.train.steps);
            c.detector.train.batch = d.value("batch", c.detector.train.batch);
            c.detector.train.lr = d.value("lr", c.detector.train.lr);
            c.detector.train.noise_aug = d.value("noise_aug", c.detector.train.noise_aug);
            c.detector.train.shift_aug = d.value("shift_aug", c.detector.train.shift_aug);
            c.detector.train.none_fraction = d.value("none_fraction", c.detector.train.none_fraction);
            c.detector.train.gate_threshold = d.value("gate_threshold", c.detector.train.gate_threshold);
            c.detector.train.log_every = d.value("log_every", c.detector.train.log_every);
        }
        if (j.contains("receler")) {
            const Json& r = j.at("receler");
            c.receler.backbone_dir = r.value("backbone_dir", "");
            c.receler.detector_dir = r.value("detector_dir", "");
            c.receler.gate_report = r.value("gate_report", "");
            c.receler.gate_samples = r.value("gate_samples", c.receler.gate_samples);
            c.receler.gate_threshold = r.value("gate_threshold", c.receler.gate_threshold);
            c.receler.concept_token = r.value("concept", "");
            TrainSchedule& s = c.receler.schedule;
            s.rounds = r.value("rounds", s.rounds);
            s.eraser_steps_per_round = r.value("eraser_steps_per_round", s.eraser_steps_per_round);
            s.adversary_steps_per_round = r.value("adversary_steps_per_round", s.adversary_steps_per_round);
            s.lambda_reg = r.value("lambda_reg", s.lambda_reg);
            s.tau = r.value("tau", s.tau);
            s.adv_tokens = r.value("adv_tokens", s.adv_tokens);
            s.batch = r.value("batch", s.batch);
            s.sample_ddim_steps = r.value("sample_ddim_steps", s.sample_ddim_steps);
            s.sample_cfg = r.value("sample_cfg", s.sample_cfg);
            s.t_band_lo = r.value("t_band_lo", s.t_band_lo);
            s.t_band_hi = r.value("t_band_hi", s.t_band_hi);
            s.eraser_opt.lr = r.value("eraser_lr", s.eraser_opt.lr);
            s.adv_opt.lr = r.value("adv_lr", s.adv_opt.lr);
            s.grid_every = r.value("grid_every", s.grid_every);
            if (r.contains("guidance")) c.receler.guidance = GuidanceConfig::from_json(r.at("guidance"));
        }
        if (j.contains("attack")) {
            const Json& a = j.at("attack");
            c.attack.backbone_dir = a.value("backbone_dir", "");
            c.attack.eraser_dir = a.value("eraser_dir", "");
            c.attack.detector_dir = a.value("detector_dir", "");
            c.attack.concept_token = a.value("concept", "");
            AttackConfig& k = c.attack.attack;
            k.k = a.value("k", k.k);
            k.steps = a.value("steps", k.steps);
            k.pool_refresh = a.value("pool_refresh", k.pool_refresh);
            k.lr = a.value("lr", k.lr);
            k.batch = a.value("batch", k.batch);
            k.sample_ddim_steps = a.value("sample_ddim_steps", k.sample_ddim_steps);
            k.sample_cfg = a.value("sample_cfg", k.sample_cfg);
            k.t_band_lo = a.value("t_band_lo", k.t_band_lo);
            k.t_band_hi = a.value("t_band_hi", k.t_band_hi);
            k.num_eval_samples = a.value("num_eval_samples", k.num_eval_samples);
            if (a.contains("guidance")) k.guidance = GuidanceConfig::from_json(a.at("guidance"));
        }
        if (j.contains("eval")) {
            const Json& e = j.at("eval");
            c.eval.backbone_dir = e.value("backbone_dir", "");
            c.eval.detector_dir = e.value("detector_dir", "");
            c.eval.eraser_dir = e.value("eraser_dir", "");
            c.eval.dataset_dir = e.value("dataset_dir", "");
            c.eval.concept_token = e.value("concept", "");
            c.eval.eval.counts.efficacy = e.value("n_efficacy", c.eval.eval.counts.efficacy);
            c.eval.eval.counts.robustness = e.value("n_robustness", c.eval.eval.counts.robustness);
            c.eval.eval.counts.locality_per_class =
                e.value("n_locality_per_class", c.eval.eval.counts.locality_per_class);
            c.eval.eval.counts.scale = e.value("scale", c.eval.eval.counts.scale);
            c.eval.eval.emit_plots = e.value("emit_plots", c.eval.eval.emit_plots);
            c.eval.eval.detector_gate = e.value("detector_gate", c.eval.eval.detector_gate);
            if (e.contains("guidance")) c.eval.eval.guidance = GuidanceConfig::from_json(e.at("guidance"));
            c.eval.gate_report = e.value("gate_report", "");
            c.eval.gate_samples = e.value("gate_samples", c.eval.gate_samples);
            c.eval.backbone_gate = e.value("backbone_gate", c.eval.backbone_gate);
            c.eval.check_backbone_gate = e.value("check_backbone_gate", c.eval.check_backbone_gate);
        }
        if (j.contains("compose")) {
            c.compose_cfg.eraser_dirs = j.at("compose").value("eraser_dirs", std::vector<std::string>{});
        }
        if (j.contains("sample")) {
            const Json& s = j.at("sample");
            c.sample.backbone_dir = s.value("backbone_dir", "");
            c.sample.eraser_dir = s.value("eraser_dir", "");
            c.sample.adv_prompt_dir = s.value("adv_prompt_dir", "");
            c.sample.prompt = s.value("prompt", std::vector<std::string>{});
            c.sample.count = s.value("count", c.sample.count);
            c.sample.stop_at_t = s.value("stop_at_t", c.sample.stop_at_t);
            if (s.contains("guidance")) c.sample.guidance = GuidanceConfig::from_json(s.at("guidance"));
        }
        return c;
    }

    Json to_json() const {
        Json concepts = Json::array();
        for (const auto& s : dataset.concepts) concepts.push_back(s.to_json());
        return Json{
            {"seed", seed},
            {"dataset",
             {{"n_per_concept", dataset.n_per_concept},
              {"image_size", dataset.image_size},
              {"heldout_fraction", dataset.heldout_fraction},
              {"canonical_fraction", dataset.canonical_fraction},
              {"concepts", concepts}}},
            {"backbone",
             {{"data_dir", backbone.data_dir},
              {"layout", backbone.layout.to_json()},
              {"num_train_steps", backbone.num_train_steps},
              {"beta_start", backbone.beta_start},
              {"beta_end", backbone.beta_end},
              {"steps", backbone.train.steps},
              {"batch", backbone.train.batch},
              {"lr", backbone.train.lr},
              {"warmup", backbone.train.warmup},
              {"final_lr_fraction", backbone.train.final_lr_fraction},
              {"p_uncond", backbone.train.p_uncond},
              {"log_every", backbone.train.log_every},
              {"detector_dir", backbone.detector_dir},
              {"gate_samples", backbone.gate_samples},
              {"gate_guidance", backbone.gate_guidance.to_json()}}},
            {"detector",
             {{"data_dir", detector.data_dir},
              {"steps", detector.train.steps},
              {"batch", detector.train.batch},
              {"lr", detector.train.lr},
              {"noise_aug", detector.train.noise_aug},
              {"shift_aug", detector.train.shift_aug},
              {"none_fraction", detector.train.none_fraction},
              {"gate_threshold", detector.train.gate_threshold},
              {"log_every", detector.train.log_every}}},
            {"receler",
             [&] {
                 Json r = receler.schedule.to_json();
                 r["backbone_dir"] = receler.backbone_dir;
                 r["detector_dir"] = receler.detector_dir;
                 r["gate_report"] = receler.gate_report;
                 r["gate_samples"] = receler.gate_samples;
                 r["gate_threshold"] = receler.gate_threshold;
                 r["concept"] = receler.concept_token;
                 r["eraser_lr"] = receler.schedule.eraser_opt.lr;
                 r["adv_lr"] = receler.schedule.adv_opt.lr;
                 r["grid_every"] = receler.schedule.grid_every;
                 r["guidance"] = receler.guidance.to_json();
                 r.erase("seed");
                 return r;
             }()},
            {"attack",
             [&] {
                 Json a = attack.attack.to_json();
                 a["backbone_dir"] = attack.backbone_dir;
                 a["eraser_dir"] = attack.eraser_dir;
                 a["detector_dir"] = attack.detector_dir;
                 a["concept"] = attack.concept_token;
                 a.erase("seed");
                 return a;
             }()},
            {"eval",
             {{"backbone_dir", eval.backbone_dir},
              {"detector_dir", eval.detector_dir},
              {"eraser_dir", eval.eraser_dir},
              {"dataset_dir", eval.dataset_dir},
              {"concept", eval.concept_token},
              {"n_efficacy", eval.eval.counts.efficacy},
              {"n_robustness", eval.eval.counts.robustness},
              {"n_locality_per_class", eval.eval.counts.locality_per_class},
              {"scale", eval.eval.counts.scale},
              {"emit_plots", eval.eval.emit_plots},
              {"detector_gate", eval.eval.detector_gate},
              {"gate_report", eval.gate_report},
              {"gate_samples", eval.gate_samples},
              {"backbone_gate", eval.backbone_gate},
              {"check_backbone_gate", eval.check_backbone_gate},
              {"guidance", eval.eval.guidance.to_json()}}},
            {"compose", {{"eraser_dirs", compose_cfg.eraser_dirs}}},
            {"sample",
             {{"backbone_dir", sample.backbone_dir},
              {"eraser_dir", sample.eraser_dir},
              {"adv_prompt_dir", sample.adv_prompt_dir},
              {"prompt", sample.prompt},
              {"count", sample.count},
              {"stop_at_t", sample.stop_at_t},
              {"guidance", sample.guidance.to_json()}}}};
    }
};

}  // namespace receler

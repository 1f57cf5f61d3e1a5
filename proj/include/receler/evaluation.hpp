#pragma once

#include <iomanip>
#include <optional>
#include <sstream>

#include "receler/core/image.hpp"
#include "receler/dataset.hpp"
#include "receler/detector.hpp"
#include "receler/eraser.hpp"

namespace receler {

// Overall score over efficacy/robustness/locality accuracies (percent).
// Zero whenever any component (100-E, 100-R, L) is zero.
inline double harmonic_mean_score(double acc_e, double acc_r, double acc_l) {
    for (double v : {acc_e, acc_r, acc_l})
        if (!(v >= 0.0 && v <= 100.0))
            throw std::invalid_argument("harmonic_mean_score: accuracies must lie in [0,100]");
    const double a = 100.0 - acc_e, b = 100.0 - acc_r, c = acc_l;
    if (a == 0.0 || b == 0.0 || c == 0.0) return 0.0;
    return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

// Percent of generations the detector assigns to `target_class`. Prompts are
// cycled round-robin; every sample draws noise from its own derived seed, so
// the number is independent of batching.
inline double measure_accuracy(const DiffusionBackbone& model, const EraserStack* erasers,
                               const std::vector<std::vector<int>>& prompts, const DetectorOracle& detector,
                               int target_class, int n_samples, uint64_t seed, const GuidanceConfig& guidance) {
    if (prompts.empty()) throw std::invalid_argument("measure_accuracy: no prompts");
    if (n_samples < 30) throw std::invalid_argument("measure_accuracy: need at least 30 samples");
    if (target_class < 0 || target_class >= detector.num_classes())
        throw std::invalid_argument("measure_accuracy: target class out of range");
    if (detector.image_size() != model.layout().image_size)
        throw std::invalid_argument("measure_accuracy: detector resolution does not match the model");

    int hit = 0;
    const int chunk = 64;
    for (int start = 0; start < n_samples; start += chunk) {
        const int m = std::min(chunk, n_samples - start);
        std::vector<std::vector<int>> batch_prompts;
        std::vector<uint64_t> seeds;
        for (int i = 0; i < m; ++i) {
            batch_prompts.push_back(prompts[static_cast<size_t>((start + i) % prompts.size())]);
            seeds.push_back(derive_seed(seed, "eval-sample", static_cast<uint64_t>(start + i)));
        }
        const Tensor imgs = model.sample_batch(guidance, batch_prompts, erasers, seeds);
        for (int c : detector.classify(imgs)) hit += (c == target_class);
    }
    return 100.0 * hit / n_samples;
}

// Per-concept canonical-prompt accuracy of the (optionally erased) model;
// the training gate requires >= 85 for every concept on the plain backbone.
inline std::vector<double> backbone_gate_accuracy(const DiffusionBackbone& model, const DetectorOracle& detector,
                                                  const std::vector<ConceptSpec>& specs, const Vocabulary& vocab,
                                                  const GuidanceConfig& guidance, int n_per_concept,
                                                  uint64_t seed) {
    std::vector<double> acc;
    for (size_t k = 0; k < specs.size(); ++k) {
        const std::vector<std::vector<int>> prompt = {{vocab.id(specs[k].canonical)}};
        acc.push_back(measure_accuracy(model, nullptr, prompt, detector, static_cast<int>(k), n_per_concept,
                                       derive_seed(seed, "gate", k), guidance));
    }
    return acc;
}

struct EvalCounts {
    int efficacy = 150;
    int robustness = 150;
    int locality_per_class = 50;
    double scale = 1.0;  // CI knob: all counts multiply by this, floored at the 30-sample minimum

    int n_efficacy() const { return scaled(efficacy); }
    int n_robustness() const { return scaled(robustness); }
    int n_locality() const { return scaled(locality_per_class); }

private:
    int scaled(int base) const { return std::max(30, static_cast<int>(std::lround(base * scale))); }
};

struct EvalConfig {
    GuidanceConfig guidance;
    EvalCounts counts;
    uint64_t seed = 0;
    bool emit_plots = false;
    double detector_gate = 0.95;
};

struct EvalReport {
    std::string concept_name;  // canonical token of the erased concept
    double acc_e = 0.0, acc_r = 0.0, acc_l = 0.0, h = 0.0;
    std::map<std::string, double> locality;  // per non-target concept
    int n_efficacy = 0, n_robustness = 0, n_locality_per_class = 0;
    uint64_t seed = 0;
    std::optional<double> attack_failure_rate;

    Json to_json() const {
        Json j{{"concept", concept_name},
               {"acc_efficacy", acc_e},
               {"acc_robustness", acc_r},
               {"acc_locality", acc_l},
               {"harmonic_mean", h},
               {"locality_per_concept", locality},
               {"n_efficacy", n_efficacy},
               {"n_robustness", n_robustness},
               {"n_locality_per_class", n_locality_per_class},
               {"seed", seed}};
        if (attack_failure_rate) j["attack_failure_rate"] = *attack_failure_rate;
        return j;
    }

    static EvalReport from_json(const Json& j) {
        EvalReport r;
        r.concept_name = j.at("concept").get<std::string>();
        r.acc_e = j.at("acc_efficacy").get<double>();
        r.acc_r = j.at("acc_robustness").get<double>();
        r.acc_l = j.at("acc_locality").get<double>();
        r.h = j.at("harmonic_mean").get<double>();
        r.locality = j.at("locality_per_concept").get<std::map<std::string, double>>();
        r.n_efficacy = j.at("n_efficacy").get<int>();
        r.n_robustness = j.at("n_robustness").get<int>();
        r.n_locality_per_class = j.at("n_locality_per_class").get<int>();
        r.seed = j.at("seed").get<uint64_t>();
        if (j.contains("attack_failure_rate")) r.attack_failure_rate = j.at("attack_failure_rate").get<double>();
        return r;
    }

    std::string table() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(1);
        os << "erased concept: " << concept_name << "\n";
        os << "  Acc_E (efficacy,  canonical prompts)  " << std::setw(6) << acc_e << "  (n=" << n_efficacy << ")\n";
        os << "  Acc_R (robustness, alias prompts)     " << std::setw(6) << acc_r << "  (n=" << n_robustness
           << ")\n";
        os << "  Acc_L (locality,  other concepts)     " << std::setw(6) << acc_l << "  (n="
           << n_locality_per_class << "/class)\n";
        os << "  H                                     " << std::setw(6) << h << "\n";
        for (const auto& [name, v] : locality) os << "    " << std::setw(14) << name << "  " << v << "\n";
        if (attack_failure_rate) os << "  attack failure rate: " << *attack_failure_rate << "\n";
        return os.str();
    }

    void save(const std::filesystem::path& dir, bool emit_plots = false) const {
        std::filesystem::create_directories(dir);
        save_json(dir / "report.json", to_json());
        std::ofstream txt(dir / "report.txt");
        txt << table();
        if (emit_plots)
            write_bar_chart(dir / "metrics.png", {"Acc_E", "Acc_R", "Acc_L", "H"}, {acc_e, acc_r, acc_l, h});
    }
};

// Full metric suite for one erased concept:
//   Acc_E on its canonical prompt, Acc_R on its alias prompts, Acc_L averaged
//   over every other concept's alias prompts (each scored against its own
//   class), and the harmonic mean.
inline EvalReport full_eval(const DiffusionBackbone& model, const EraserStack* erasers, int concept_idx,
                            const DetectorOracle& detector, const std::vector<ConceptSpec>& specs,
                            const Vocabulary& vocab, const EvalConfig& cfg) {
    detector.require_gated(cfg.detector_gate);
    if (concept_idx < 0 || concept_idx >= static_cast<int>(specs.size()))
        throw std::invalid_argument("full_eval: concept index out of range");
    if (erasers) erasers->check_compatible(model.attn_layers());

    EvalReport rep;
    rep.concept_name = specs[static_cast<size_t>(concept_idx)].canonical;
    rep.seed = cfg.seed;
    rep.n_efficacy = cfg.counts.n_efficacy();
    rep.n_robustness = cfg.counts.n_robustness();
    rep.n_locality_per_class = cfg.counts.n_locality();

    const std::vector<std::vector<int>> canonical = {{vocab.id(rep.concept_name)}};
    rep.acc_e = measure_accuracy(model, erasers, canonical, detector, concept_idx, rep.n_efficacy,
                                 derive_seed(cfg.seed, "efficacy"), cfg.guidance);
    rep.acc_r = measure_accuracy(model, erasers, paraphrase_prompts(specs, vocab, concept_idx), detector,
                                 concept_idx, rep.n_robustness, derive_seed(cfg.seed, "robustness"), cfg.guidance);

    double loc_sum = 0.0;
    int loc_n = 0;
    for (int other = 0; other < static_cast<int>(specs.size()); ++other) {
        if (other == concept_idx) continue;
        const double a =
            measure_accuracy(model, erasers, paraphrase_prompts(specs, vocab, other), detector, other,
                             rep.n_locality_per_class, derive_seed(cfg.seed, "locality", other), cfg.guidance);
        rep.locality[specs[static_cast<size_t>(other)].canonical] = a;
        loc_sum += a;
        ++loc_n;
    }
    rep.acc_l = loc_sum / loc_n;
    rep.h = harmonic_mean_score(rep.acc_e, rep.acc_r, rep.acc_l);
    return rep;
}

}  // namespace receler

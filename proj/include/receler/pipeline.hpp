#pragma once

#include <filesystem>

#include "receler/evaluation.hpp"

namespace receler {

// Result of the backbone sample-quality gate: per-concept accuracy of the
// plain (unerased) model on canonical prompts, judged by a gated detector.
// Stored alongside run artifacts and reusable wherever both hashes match.
struct GateReport {
    std::string backbone_hash;
    std::string detector_hash;
    int samples_per_concept = 0;
    uint64_t seed = 0;
    GuidanceConfig guidance;
    std::vector<std::string> classes;
    std::vector<double> accuracy;  // percent, aligned with classes
    double threshold = 85.0;
    bool passed = false;

    Json to_json() const {
        return Json{{"kind", "gate_report"},
                    {"backbone_hash", backbone_hash},
                    {"detector_hash", detector_hash},
                    {"samples_per_concept", samples_per_concept},
                    {"seed", seed},
                    {"guidance", guidance.to_json()},
                    {"classes", classes},
                    {"accuracy", accuracy},
                    {"threshold", threshold},
                    {"passed", passed}};
    }
    static GateReport from_json(const Json& j) {
        GateReport g;
        g.backbone_hash = j.at("backbone_hash").get<std::string>();
        g.detector_hash = j.at("detector_hash").get<std::string>();
        g.samples_per_concept = j.at("samples_per_concept").get<int>();
        g.seed = j.at("seed").get<uint64_t>();
        g.guidance = GuidanceConfig::from_json(j.at("guidance"));
        g.classes = j.at("classes").get<std::vector<std::string>>();
        g.accuracy = j.at("accuracy").get<std::vector<double>>();
        g.threshold = j.at("threshold").get<double>();
        g.passed = j.at("passed").get<bool>();
        return g;
    }
};

// Canonical-prompt accuracy of the plain backbone per concept. Concepts are
// the detector's real classes; each must reach `threshold` percent.
inline GateReport run_backbone_gate(const DiffusionBackbone& model, const DetectorOracle& detector,
                                    const GuidanceConfig& guidance, int samples_per_concept, uint64_t seed,
                                    double threshold = 85.0) {
    GateReport rep;
    rep.backbone_hash = model.manifest_hash();
    rep.detector_hash = detector.manifest_hash();
    rep.samples_per_concept = samples_per_concept;
    rep.seed = seed;
    rep.guidance = guidance;
    rep.threshold = threshold;
    rep.passed = true;
    for (int k = 0; k + 1 < detector.num_classes(); ++k) {
        const std::string& name = detector.class_names()[static_cast<size_t>(k)];
        const std::vector<std::vector<int>> prompt = {{model.vocab().id(name)}};
        const double acc =
            measure_accuracy(model, nullptr, prompt, detector, k, samples_per_concept,
                             derive_seed(seed, "backbone-gate", static_cast<uint64_t>(k)), guidance);
        rep.classes.push_back(name);
        rep.accuracy.push_back(acc);
        if (acc < threshold) rep.passed = false;
    }
    return rep;
}

// Load a stored gate result and insist it belongs to this (backbone,
// detector) pair and actually passed.
inline GateReport load_gate_report(const std::filesystem::path& path, const std::string& backbone_hash,
                                   const std::string& detector_hash) {
    Json j = load_json(path);
    if (j.value("kind", "") != "gate_report")
        throw std::runtime_error(path.string() + " is not a gate report");
    GateReport g = GateReport::from_json(j);
    if (g.backbone_hash != backbone_hash)
        throw std::runtime_error("gate report " + path.string() + " was produced for a different backbone");
    if (g.detector_hash != detector_hash)
        throw std::runtime_error("gate report " + path.string() + " was produced for a different detector");
    return g;
}

inline void require_gate_passed(const GateReport& g) {
    if (g.passed) return;
    std::string msg = "backbone gate failure:";
    for (size_t i = 0; i < g.classes.size(); ++i)
        if (g.accuracy[i] < g.threshold)
            msg += " " + g.classes[i] + "=" + std::to_string(g.accuracy[i]);
    throw std::runtime_error(msg + " (threshold " + std::to_string(g.threshold) + ")");
}

// Specs and vocabulary straight from a corpus manifest (images untouched).
inline std::pair<std::vector<ConceptSpec>, Vocabulary> load_corpus_specs(const std::filesystem::path& dir) {
    Json m = load_manifest(dir, "corpus");
    std::vector<ConceptSpec> specs;
    for (const auto& sj : m.at("specs")) specs.push_back(ConceptSpec::from_json(sj));
    return {std::move(specs), Vocabulary::from_json(m.at("vocab"))};
}

}  // namespace receler

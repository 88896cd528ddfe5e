#pragma once

// Evolutionary search over full parameter vectors (continuous and discrete)
// with uniform crossover, per-gene mutation and elitist survivor selection.

#include <algorithm>
#include <chrono>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "embedder.hpp"
#include "param_schema.hpp"
#include "rng.hpp"

namespace t2p {

enum class Provenance { snapshot, random, child };

inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::snapshot: return "snapshot";
        case Provenance::random: return "random";
        case Provenance::child: return "child";
    }
    return "?";
}

struct Candidate {
    FacialParams params;
    std::optional<double> score;
    Provenance provenance = Provenance::random;
};

using Population = std::vector<Candidate>;
using Scorer = std::function<double(const FacialParams&)>;

enum class SurvivorRule {
    truncation,  // top-P of parents and children
    pairwise,    // each pair keeps its child and its better parent, then top-P
};

NLOHMANN_JSON_SERIALIZE_ENUM(SurvivorRule, {{SurvivorRule::truncation, "truncation"}, {SurvivorRule::pairwise, "pairwise"}})

struct EvoConfig {
    std::size_t population_size = 10;
    std::size_t parent_pairs = 10;
    double crossover_rate = 0.4;
    double mutation_rate = 0.05;
    double mutation_sigma = 0.1;
    double father_prob = 0.5;  // P(child gene comes from the first parent)
    double alpha = 0.8;
    double epsilon = 1e-4;
    int window = 20;
    int max_generations = 200;
    SurvivorRule survivor = SurvivorRule::truncation;
    double budget_seconds = 0.0;  // wall-clock cap checked between generations, 0 = none

    void validate() const {
        auto rate = [](double v, const char* name) {
            if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("evo: ") + name + " outside [0,1]");
        };
        rate(crossover_rate, "crossover_rate");
        rate(mutation_rate, "mutation_rate");
        rate(father_prob, "father_prob");
        rate(alpha, "alpha");
        if (population_size < 2) throw ValidationError("evo: population size must be >= 2");
        if (parent_pairs == 0) throw ValidationError("evo: parent_pairs must be >= 1");
        if (mutation_sigma < 0.0) throw ValidationError("evo: negative mutation_sigma");
        if (window < 1 || max_generations < 0 || budget_seconds < 0.0) throw ValidationError("evo: bad termination settings");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvoConfig, population_size, parent_pairs, crossover_rate, mutation_rate,
                                                mutation_sigma, father_prob, alpha, epsilon, window, max_generations,
                                                survivor, budget_seconds)

/// Snapshot continuous vectors with all discrete slots at zero, then uniform
/// random candidates up to the population size.
inline Population init_population(const std::vector<std::vector<double>>& snapshots, const ParamSchema& schema,
                                  Rng& rng, const EvoConfig& cfg) {
    cfg.validate();
    if (snapshots.size() > cfg.population_size)
        throw ValidationError("init_population: " + std::to_string(snapshots.size()) +
                              " snapshots exceed population size " + std::to_string(cfg.population_size));
    Population pop;
    for (const auto& s : snapshots) {
        Candidate c;
        c.params = neutral_params(schema);
        if (s.size() != schema.continuous_count())
            throw ValidationError("init_population: snapshot has " + std::to_string(s.size()) + " values, schema has " +
                                  std::to_string(schema.continuous_count()));
        c.params.continuous = s;
        for (double& v : c.params.continuous) v = std::clamp(v, 0.0, 1.0);
        std::fill(c.params.discrete.begin(), c.params.discrete.end(), 0);
        c.provenance = Provenance::snapshot;
        pop.push_back(std::move(c));
    }
    while (pop.size() < cfg.population_size) pop.push_back({sample_uniform(schema, rng), std::nullopt, Provenance::random});
    return pop;
}

/// With probability crossover_rate, every gene is drawn independently from
/// one of the parents; otherwise the child copies the better-scoring parent.
inline FacialParams crossover(const Candidate& f, const Candidate& m, Rng& rng, const EvoConfig& cfg) {
    if (f.params.schema_id != m.params.schema_id || f.params.continuous.size() != m.params.continuous.size() ||
        f.params.discrete.size() != m.params.discrete.size())
        throw ValidationError("crossover: parents from different schemas");
    if (!rng.bernoulli(cfg.crossover_rate)) return m.score.value_or(0.0) > f.score.value_or(0.0) ? m.params : f.params;
    FacialParams child = f.params;
    for (std::size_t i = 0; i < child.continuous.size(); ++i)
        if (!rng.bernoulli(cfg.father_prob)) child.continuous[i] = m.params.continuous[i];
    for (std::size_t i = 0; i < child.discrete.size(); ++i)
        if (!rng.bernoulli(cfg.father_prob)) child.discrete[i] = m.params.discrete[i];
    return child;
}

/// Each coordinate mutates with probability mutation_rate: continuous genes
/// get clamped Gaussian noise, discrete genes are resampled uniformly.
/// Returns the number of coordinates selected for mutation.
inline std::size_t mutate(FacialParams& p, const ParamSchema& schema, Rng& rng, const EvoConfig& cfg) {
    std::size_t hits = 0;
    for (double& v : p.continuous)
        if (rng.bernoulli(cfg.mutation_rate)) {
            v = std::clamp(v + cfg.mutation_sigma * rng.normal(), 0.0, 1.0);
            ++hits;
        }
    for (std::size_t i = 0; i < p.discrete.size(); ++i)
        if (rng.bernoulli(cfg.mutation_rate)) {
            p.discrete[i] = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(schema.discrete[i].cardinality)));
            ++hits;
        }
    return hits;
}

struct GenerationStats {
    int generation = 0;
    double best_score = 0.0;
    double mean_score = 0.0;
    std::size_t evaluations = 0;  // cumulative scorer calls
};

struct EvoResult {
    Candidate best;
    std::vector<GenerationStats> curve;
    Population population;
    bool converged = false;
    bool out_of_time = false;
};

inline std::string evo_curve_csv(const std::vector<GenerationStats>& curve) {
    std::ostringstream out;
    out.precision(17);
    out << "generation,best_score,mean_score,evaluations\n";
    for (const auto& g : curve) out << g.generation << ',' << g.best_score << ',' << g.mean_score << ',' << g.evaluations << '\n';
    return out.str();
}

namespace detail {

inline void sort_by_score(Population& pop) {
    std::stable_sort(pop.begin(), pop.end(), [](const Candidate& a, const Candidate& b) { return *a.score > *b.score; });
}

}  // namespace detail

/// Generation 0 scores the initial population. Each later generation draws
/// parent_pairs pairs uniformly with replacement, breeds one child per pair
/// and keeps population_size survivors. Stops when the best score improved
/// by less than epsilon over the last `window` generations, or at
/// max_generations, or once budget_seconds have elapsed.
inline EvoResult evolve(Population init, const Scorer& scorer, const ParamSchema& schema, const EvoConfig& cfg, Rng& rng,
                        const std::function<void(const GenerationStats&, const Population&)>& on_generation = {}) {
    cfg.validate();
    if (init.size() < 2) throw ValidationError("evolve: population needs at least 2 candidates");
    EvoResult r;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t evals = 0;
    int generation = 0;
    auto score = [&](Candidate& c) {
        if (c.score) return;
        try {
            c.score = scorer(c.params);
        } catch (const std::exception& e) {
            throw Error("evolve: scorer failed at generation " + std::to_string(generation) + ": " + e.what());
        }
        ++evals;
    };
    auto record = [&](Population& pop) {
        double best = *pop.front().score, sum = 0.0;
        for (const auto& c : pop) {
            best = std::max(best, *c.score);
            sum += *c.score;
        }
        r.curve.push_back({generation, best, sum / static_cast<double>(pop.size()), evals});
        if (on_generation) on_generation(r.curve.back(), pop);
    };

    Population pop = std::move(init);
    for (auto& c : pop) score(c);
    detail::sort_by_score(pop);
    if (pop.size() > cfg.population_size) pop.resize(cfg.population_size);
    record(pop);

    for (generation = 1; generation <= cfg.max_generations; ++generation) {
        const std::size_t n = pop.size();
        Population children;
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (std::size_t k = 0; k < cfg.parent_pairs; ++k) {
            const std::size_t i = rng.uniform_index(n);
            std::size_t j = rng.uniform_index(n - 1);
            if (j >= i) ++j;
            pairs.emplace_back(i, j);
            Candidate child{crossover(pop[i], pop[j], rng, cfg), std::nullopt, Provenance::child};
            mutate(child.params, schema, rng, cfg);
            children.push_back(std::move(child));
        }
        for (auto& c : children) score(c);

        Population next;
        if (cfg.survivor == SurvivorRule::truncation) {
            next = pop;
            next.insert(next.end(), children.begin(), children.end());
        } else {
            std::vector<bool> kept(n, false);
            for (std::size_t k = 0; k < pairs.size(); ++k) {
                const auto [i, j] = pairs[k];
                kept[*pop[j].score > *pop[i].score ? j : i] = true;
                next.push_back(children[k]);
            }
            for (std::size_t i = 0; i < n; ++i)
                if (kept[i]) next.push_back(pop[i]);
            // Refill from the remaining parents if the pool came out short.
            for (std::size_t i = 0; i < n && next.size() < cfg.population_size; ++i)
                if (!kept[i]) next.push_back(pop[i]);
        }
        detail::sort_by_score(next);
        if (cfg.survivor == SurvivorRule::pairwise && *next.front().score < *pop.front().score) {
            // Keep the incumbent so the best score never regresses.
            next.insert(next.begin(), pop.front());
        }
        if (next.size() > cfg.population_size) next.resize(cfg.population_size);
        pop = std::move(next);
        record(pop);

        const int g = static_cast<int>(r.curve.size()) - 1;
        if (g >= cfg.window && r.curve[g].best_score - r.curve[g - cfg.window].best_score < cfg.epsilon) {
            r.converged = true;
            break;
        }
        if (cfg.budget_seconds > 0.0 &&
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >= cfg.budget_seconds) {
            r.out_of_time = true;
            break;
        }
    }
    r.best = pop.front();
    r.population = std::move(pop);
    return r;
}

/// Scorer for evolution: the two-view score of a prompt against engine renders.
inline Scorer make_clip_scorer(const EmbedderBackend& backend, const PromptEmbedding& prompt, const EngineLayout& layout,
                               double alpha, int resolution) {
    return [&backend, prompt, &layout, alpha, resolution](const FacialParams& p) {
        return clip_score(backend, prompt, p, layout, alpha, resolution);
    };
}

}  // namespace t2p

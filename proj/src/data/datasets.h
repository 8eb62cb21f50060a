#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/rng.h"

namespace ipc {

enum class preset_kind { object, portrait, scene, custom };

const char * preset_name(preset_kind p);
preset_kind preset_from_name(const std::string & s);

// fixed concept tables; the object list carries the 15 published classes plus
// 5 documented stand-ins to reach the stated 20
const std::vector<std::string> & preset_concepts(preset_kind p);

struct manifest_entry {
    std::string path;
    std::string concept;
    std::string dataset;
};

struct manifest {
    std::vector<manifest_entry> entries;
    preset_kind preset = preset_kind::custom;
    uint64_t seed = 0;

    uint64_t content_hash() const;
    void save(const std::string & path) const; // json lines
    static manifest load(const std::string & path);
};

// deterministic selection: lexicographic discovery, seeded shuffle, fixed
// per-preset counts (object/scene: 20 concepts x 5; portrait: 10 ids x 10)
manifest build_manifest(preset_kind preset, const std::string & source_root, uint64_t seed);

struct training_pair_idx {
    size_t ref = 0;
    size_t target = 0;
};

// one epoch of pairs: every entry appears as ref exactly once; with ab the
// target is a uniformly drawn different image of the same concept
std::vector<training_pair_idx> make_ab_pairs(const manifest & m, bool ab, uint64_t epoch_seed);

// ---------------------------------------------------------------------------
// evaluation sets

enum class eval_set_kind { coco_val_5k, imagenet_val, retrieval_pairs };

struct eval_record {
    std::string path;
    int label = -1;
    std::vector<std::string> captions;
};

struct eval_set {
    std::string name;
    std::vector<eval_record> records;
    std::vector<std::string> class_names;
};

// `aux` is the captions file (coco/retrieval) or an optional dir->label json
// map (imagenet). Never downloads; missing data raises an actionable error.
eval_set load_eval_set(eval_set_kind kind, const std::string & root, const std::string & aux = "");

eval_set subsample(const eval_set & s, int64_t n, uint64_t seed);

// test/train disjointness guard
std::vector<std::string> overlapping_paths(const manifest & m, const eval_set & s);

} // namespace ipc

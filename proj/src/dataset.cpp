#include "histovit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "histovit/error.hpp"
#include "histovit/rng.hpp"

namespace histovit {

MainClass main_class_of(Subclass subclass) {
    switch (subclass) {
        case Subclass::A:
        case Subclass::F:
        case Subclass::TA:
        case Subclass::PT:
            return MainClass::benign;
        case Subclass::DC:
        case Subclass::LC:
        case Subclass::MC:
        case Subclass::PC:
            return MainClass::malignant;
    }
    throw Error(ErrorCategory::integrity, "unknown subclass value");
}

std::string_view to_string(Subclass subclass) {
    switch (subclass) {
        case Subclass::A: return "A";
        case Subclass::F: return "F";
        case Subclass::TA: return "TA";
        case Subclass::PT: return "PT";
        case Subclass::DC: return "DC";
        case Subclass::LC: return "LC";
        case Subclass::MC: return "MC";
        case Subclass::PC: return "PC";
    }
    return "?";
}

std::string_view to_string(MainClass main_class) {
    return main_class == MainClass::benign ? "benign" : "malignant";
}

std::optional<Subclass> parse_subclass(std::string_view token) {
    for (Subclass s : kAllSubclasses) {
        if (to_string(s) == token) return s;
    }
    return std::nullopt;
}

std::size_t subclass_index(Subclass subclass) { return static_cast<std::size_t>(subclass); }

std::optional<std::size_t> magnification_index(int magnification) {
    for (std::size_t i = 0; i < kMagnifications.size(); ++i) {
        if (kMagnifications[i] == magnification) return i;
    }
    return std::nullopt;
}

DatasetManifest DatasetManifest::from_records(std::vector<SampleRecord> records) {
    DatasetManifest m;
    std::unordered_set<std::string> ids;
    ids.reserve(records.size());
    for (const SampleRecord& r : records) {
        if (!ids.insert(r.sample_id).second)
            throw Error(ErrorCategory::integrity, "duplicate sample id '" + r.sample_id + "'");
        const auto mag = magnification_index(r.magnification);
        if (!mag)
            throw Error(ErrorCategory::integrity,
                        "magnification " + std::to_string(r.magnification) + " is not one of 40/100/200/400");
        m.histogram_[subclass_index(r.subclass)][*mag] += 1;
    }
    m.records_ = std::move(records);
    return m;
}

std::size_t DatasetManifest::count(Subclass subclass, int magnification) const {
    const auto mag = magnification_index(magnification);
    if (!mag) return 0;
    return histogram_[subclass_index(subclass)][*mag];
}

std::size_t DatasetManifest::count(Subclass subclass) const {
    std::size_t total = 0;
    for (std::size_t i = 0; i < kMagnifications.size(); ++i)
        total += histogram_[subclass_index(subclass)][i];
    return total;
}

std::size_t DatasetManifest::count_magnification(int magnification) const {
    const auto mag = magnification_index(magnification);
    if (!mag) return 0;
    std::size_t total = 0;
    for (const auto& row : histogram_) total += row[*mag];
    return total;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
    std::vector<SampleRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string fields[6];
        std::size_t n = 0;
        while (n < 6 && std::getline(ls, fields[n], '|')) ++n;
        if (n < 5)
            throw Error(ErrorCategory::parse, path.string() + ":" + std::to_string(line_no) +
                                                  ": expected 5 fields, got " + std::to_string(n));
        SampleRecord rec;
        rec.sample_id = fields[0];
        rec.path = fields[1];
        const auto subclass = parse_subclass(fields[2]);
        if (!subclass)
            throw Error(ErrorCategory::parse, path.string() + ":" + std::to_string(line_no) +
                                                  ": unknown subclass '" + fields[2] + "'");
        rec.subclass = *subclass;
        try {
            rec.magnification = std::stoi(fields[3]);
        } catch (const std::exception&) {
            throw Error(ErrorCategory::parse, path.string() + ":" + std::to_string(line_no) +
                                                  ": bad magnification '" + fields[3] + "'");
        }
        if (!magnification_index(rec.magnification))
            throw Error(ErrorCategory::parse, path.string() + ":" + std::to_string(line_no) +
                                                  ": unknown magnification '" + fields[3] + "'");
        rec.patient_id = fields[4];
        if (n == 6 && fields[5] != to_string(rec.main_class()))
            throw Error(ErrorCategory::integrity,
                        path.string() + ":" + std::to_string(line_no) + ": main class '" +
                            fields[5] + "' contradicts subclass " +
                            std::string(to_string(rec.subclass)));
        records.push_back(std::move(rec));
    }
    return DatasetManifest::from_records(std::move(records));
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCategory::io, "cannot open " + path.string() + " for writing");
    for (const SampleRecord& r : manifest.records()) {
        out << r.sample_id << "|" << r.path << "|" << to_string(r.subclass) << "|"
            << r.magnification << "|" << r.patient_id << "\n";
    }
    if (!out) throw Error(ErrorCategory::io, "write failed for " + path.string());
}

namespace {

std::string group_tag(BalanceScope scope, int magnification) {
    if (scope == BalanceScope::magnification_independent) return "all";
    return std::to_string(magnification) + "x";
}

}  // namespace

DatasetManifest undersample_balance(const DatasetManifest& manifest, BalanceScope scope,
                                    std::uint64_t seed) {
    if (manifest.empty())
        throw Error(ErrorCategory::balance, "cannot balance an empty manifest");

    // Subclasses present anywhere in the manifest define the expected strata;
    // a group missing one of them cannot be balanced.
    std::set<Subclass> present;
    for (const SampleRecord& r : manifest.records()) present.insert(r.subclass);

    std::vector<std::pair<std::string, std::vector<const SampleRecord*>>> groups;
    if (scope == BalanceScope::magnification_independent) {
        groups.emplace_back(group_tag(scope, 0), std::vector<const SampleRecord*>{});
        for (const SampleRecord& r : manifest.records()) groups[0].second.push_back(&r);
    } else {
        for (int mag : kMagnifications) {
            groups.emplace_back(group_tag(scope, mag), std::vector<const SampleRecord*>{});
        }
        for (const SampleRecord& r : manifest.records()) {
            groups[*magnification_index(r.magnification)].second.push_back(&r);
        }
    }

    std::unordered_set<const SampleRecord*> keep;
    for (auto& [tag, members] : groups) {
        if (members.empty()) continue;
        std::map<Subclass, std::vector<const SampleRecord*>> buckets;
        for (const SampleRecord* r : members) buckets[r->subclass].push_back(r);
        for (Subclass s : present) {
            if (!buckets.contains(s))
                throw Error(ErrorCategory::balance, "scope group " + tag + " has no " +
                                                        std::string(to_string(s)) + " samples");
        }
        std::size_t target = members.size();
        for (const auto& [s, bucket] : buckets) target = std::min(target, bucket.size());
        for (auto& [s, bucket] : buckets) {
            rng::Stream stream(
                rng::derive(seed, "balance-" + tag + "-" + std::string(to_string(s))));
            stream.shuffle(bucket);
            for (std::size_t i = 0; i < target; ++i) keep.insert(bucket[i]);
        }
    }

    std::vector<SampleRecord> out;
    out.reserve(keep.size());
    for (const SampleRecord& r : manifest.records()) {
        if (keep.contains(&r)) out.push_back(r);
    }
    return DatasetManifest::from_records(std::move(out));
}

SplitPlan make_split(const DatasetManifest& manifest, double test_fraction,
                     bool stratify_magnification, std::uint64_t seed, bool by_patient) {
    if (test_fraction <= 0.0 || test_fraction >= 1.0)
        throw Error(ErrorCategory::split, "test fraction must lie strictly inside (0, 1)");
    if (manifest.empty()) throw Error(ErrorCategory::split, "cannot split an empty manifest");

    SplitPlan plan;
    plan.seed = seed;
    plan.test_fraction = test_fraction;
    plan.stratify_keys.push_back("subclass");
    if (stratify_magnification) plan.stratify_keys.push_back("magnification");
    plan.by_patient = by_patient;

    // Strata in deterministic key order, members in manifest order.
    std::map<std::string, std::vector<const SampleRecord*>> strata;
    for (const SampleRecord& r : manifest.records()) {
        std::string key(to_string(r.subclass));
        if (stratify_magnification) key += "/" + std::to_string(r.magnification);
        strata[key].push_back(&r);
    }

    std::vector<std::size_t> train_pos, test_pos;
    for (auto& [key, members] : strata) {
        rng::Stream stream(rng::derive(seed, "split-" + key));
        if (!by_patient) {
            if (members.size() < 2)
                throw Error(ErrorCategory::split, "stratum " + key + " has fewer than 2 samples");
            std::vector<const SampleRecord*> order = members;
            stream.shuffle(order);
            const std::size_t n_test = static_cast<std::size_t>(
                std::llround(test_fraction * static_cast<double>(order.size())));
            for (std::size_t i = 0; i < order.size(); ++i) {
                const std::size_t pos =
                    static_cast<std::size_t>(order[i] - manifest.records().data());
                (i < n_test ? test_pos : train_pos).push_back(pos);
            }
        } else {
            // Whole patients move together; the per-stratum fraction is then
            // only approximate, which is why this mode is not the default.
            std::vector<std::string> patients;
            std::map<std::string, std::vector<const SampleRecord*>> by_pat;
            for (const SampleRecord* r : members) {
                if (!by_pat.contains(r->patient_id)) patients.push_back(r->patient_id);
                by_pat[r->patient_id].push_back(r);
            }
            if (patients.size() < 2)
                throw Error(ErrorCategory::split, "stratum " + key + " has fewer than 2 patients");
            stream.shuffle(patients);
            const std::size_t n_test = std::max<std::size_t>(
                1, static_cast<std::size_t>(
                       std::llround(test_fraction * static_cast<double>(patients.size()))));
            for (std::size_t i = 0; i < patients.size(); ++i) {
                for (const SampleRecord* r : by_pat[patients[i]]) {
                    const std::size_t pos =
                        static_cast<std::size_t>(r - manifest.records().data());
                    (i < n_test ? test_pos : train_pos).push_back(pos);
                }
            }
        }
    }
    std::sort(train_pos.begin(), train_pos.end());
    std::sort(test_pos.begin(), test_pos.end());
    for (std::size_t pos : train_pos) plan.train_ids.push_back(manifest.records()[pos].sample_id);
    for (std::size_t pos : test_pos) plan.test_ids.push_back(manifest.records()[pos].sample_id);
    return plan;
}

void save_split(const std::filesystem::path& path, const SplitPlan& plan) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCategory::io, "cannot open " + path.string() + " for writing");
    out << "histovit-split 1\n";
    out << "seed=" << plan.seed << "\n";
    out << "test_fraction=" << plan.test_fraction << "\n";
    out << "stratify=";
    for (std::size_t i = 0; i < plan.stratify_keys.size(); ++i) {
        if (i) out << ",";
        out << plan.stratify_keys[i];
    }
    out << "\n";
    out << "by_patient=" << (plan.by_patient ? 1 : 0) << "\n";
    for (const std::string& id : plan.train_ids) out << "train " << id << "\n";
    for (const std::string& id : plan.test_ids) out << "test " << id << "\n";
    if (!out) throw Error(ErrorCategory::io, "write failed for " + path.string());
}

SplitPlan load_split(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "histovit-split 1")
        throw Error(ErrorCategory::parse, path.string() + ": not a split file");
    SplitPlan plan;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line.starts_with("seed=")) {
            plan.seed = std::stoull(line.substr(5));
        } else if (line.starts_with("test_fraction=")) {
            plan.test_fraction = std::stod(line.substr(14));
        } else if (line.starts_with("stratify=")) {
            std::istringstream ls(line.substr(9));
            std::string key;
            while (std::getline(ls, key, ',')) plan.stratify_keys.push_back(key);
        } else if (line.starts_with("by_patient=")) {
            plan.by_patient = line.substr(11) == "1";
        } else if (line.starts_with("train ")) {
            plan.train_ids.push_back(line.substr(6));
        } else if (line.starts_with("test ")) {
            plan.test_ids.push_back(line.substr(5));
        } else {
            throw Error(ErrorCategory::parse,
                        path.string() + ":" + std::to_string(line_no) + ": unknown line");
        }
    }
    return plan;
}

std::map<int, DatasetManifest> partition_by_magnification(const DatasetManifest& manifest) {
    std::map<int, std::vector<SampleRecord>> parts;
    for (int mag : kMagnifications) parts[mag] = {};
    for (const SampleRecord& r : manifest.records()) parts[r.magnification].push_back(r);
    std::map<int, DatasetManifest> out;
    for (auto& [mag, records] : parts) {
        out.emplace(mag, DatasetManifest::from_records(std::move(records)));
    }
    return out;
}

}  // namespace histovit

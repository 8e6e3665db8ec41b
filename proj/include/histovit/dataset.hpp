#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace histovit {

// BreakHis tumor taxonomy: four benign and four malignant subclasses. The
// main class is always derived from the subclass, never stored.
enum class Subclass { A, F, TA, PT, DC, LC, MC, PC };
enum class MainClass { benign, malignant };

inline constexpr std::array<Subclass, 8> kAllSubclasses{
    Subclass::A,  Subclass::F,  Subclass::TA, Subclass::PT,
    Subclass::DC, Subclass::LC, Subclass::MC, Subclass::PC};
inline constexpr std::array<int, 4> kMagnifications{40, 100, 200, 400};

MainClass main_class_of(Subclass subclass);
std::string_view to_string(Subclass subclass);
std::string_view to_string(MainClass main_class);
std::optional<Subclass> parse_subclass(std::string_view token);
std::size_t subclass_index(Subclass subclass);
std::optional<std::size_t> magnification_index(int magnification);

struct SampleRecord {
    std::string sample_id;
    std::string path;
    Subclass subclass = Subclass::A;
    int magnification = 40;
    std::string patient_id;

    MainClass main_class() const { return main_class_of(subclass); }
};

// Immutable collection of samples with a cached subclass x magnification
// histogram. sample_ids are unique.
class DatasetManifest {
  public:
    DatasetManifest() = default;
    static DatasetManifest from_records(std::vector<SampleRecord> records);

    const std::vector<SampleRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    std::size_t count(Subclass subclass, int magnification) const;
    std::size_t count(Subclass subclass) const;
    std::size_t count_magnification(int magnification) const;

  private:
    std::vector<SampleRecord> records_;
    std::array<std::array<std::size_t, 4>, 8> histogram_{};
};

// Manifest file: line-delimited `sample_id|path|subclass|magnification|patient_id`.
// An optional sixth main-class field is accepted and validated against the
// subclass (it is never written).
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

enum class BalanceScope { magnification_independent, magnification_dependent };

// Seeded uniform undersampling without replacement: within each scope group,
// every subclass is cut down to the size of the group's smallest subclass.
DatasetManifest undersample_balance(const DatasetManifest& manifest, BalanceScope scope,
                                    std::uint64_t seed);

struct SplitPlan {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    std::uint64_t seed = 0;
    double test_fraction = 0.2;
    std::vector<std::string> stratify_keys;  // e.g. {"subclass"} or {"subclass", "magnification"}
    bool by_patient = false;
};

// Stratified train/test split. Default stratification is by subclass, with
// magnification added on request; the optional patient mode keeps all samples
// of one patient on the same side.
SplitPlan make_split(const DatasetManifest& manifest, double test_fraction,
                     bool stratify_magnification, std::uint64_t seed, bool by_patient = false);

void save_split(const std::filesystem::path& path, const SplitPlan& plan);
SplitPlan load_split(const std::filesystem::path& path);

// Four disjoint manifests keyed by magnification whose union is the input.
std::map<int, DatasetManifest> partition_by_magnification(const DatasetManifest& manifest);

}  // namespace histovit

#include "tokenflow/dataset.hpp"

#include "tokenflow/init.hpp"
#include "tokenflow/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace tokenflow {

namespace {

constexpr char kRecordsMagic[4] = {'M', 'M', 'T', 'D'};
constexpr std::uint32_t kRecordsVersion = 1;
constexpr std::uint64_t kRecordsHeaderBytes = 4 + 4 + 8;

struct ScenarioData {
  std::vector<SceneState> states;
  std::vector<LinkLabels> labels;
  std::vector<std::vector<ModalityFrame>> frames;
};

ScenarioData generate(const ScenarioConfig& config, const BeamCodebook& codebook, std::uint64_t seed) {
  ScenarioData d;
  d.states = simulate_scenario(config, seed);
  for (const auto& s : d.states) d.labels.push_back(label_state(s, config, codebook));
  std::uint64_t noise_seed = seed;
  std::mt19937_64 noise(splitmix64(noise_seed));
  for (std::size_t f = 0; f < d.states.size(); ++f) {
    const double previous = d.labels[f == 0 ? 0 : f - 1].best_rss.at(0);
    d.frames.push_back(render_frame(d.states[f], config, previous, noise));
  }
  return d;
}

Index validation_scenarios(Index scenarios) {
  if (scenarios < 2) return 0;
  return std::max<Index>(1, Index(std::lround(0.1 * double(scenarios))));
}

std::uint64_t frame_bytes(const std::vector<ModalityFrame>& frame) {
  std::uint64_t total = 0;
  for (const auto& m : frame) total += tensor_blob_size(m.payload.shape(), StorageType::kFloat32);
  return total;
}

nlohmann::json box_json(const Box& b) { return {b.x, b.y, b.length, b.width, b.height, b.vx}; }

Box box_from(const nlohmann::json& j) {
  return {j.at(0), j.at(1), j.at(2), j.at(3), j.at(4), j.at(5)};
}

[[noreturn]] void corrupt(FormatErrorKind kind, const std::string& what) { throw FormatError(kind, "dataset: " + what); }

}  // namespace

std::vector<ModalityFrame> Dataset::window(Index sample) const {
  const SampleRecord& r = samples.at(std::size_t(sample));
  std::vector<ModalityFrame> out;
  const auto& scenario = frames.at(std::size_t(r.scenario));
  for (Index k = 0; k < config.tau; ++k) {
    for (ModalityFrame m : scenario.at(std::size_t(r.t - config.tau + 1 + k))) {
      m.frame_index = k;
      out.push_back(std::move(m));
    }
  }
  return out;
}

Target Dataset::target(Index sample) const {
  const SampleRecord& r = samples.at(std::size_t(sample));
  Target t;
  t.beam = r.beam;
  t.link = Tensor({Index(r.link.size())});
  for (std::size_t v = 0; v < r.link.size(); ++v) t.link[Index(v)] = r.link[v];
  return t;
}

std::vector<Index> Dataset::indices(Split split) const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i)
    if (samples[std::size_t(i)].split == split) out.push_back(i);
  return out;
}

Dataset build_dataset(const ScenarioConfig& config) {
  config.validate();
  const BeamCodebook codebook = build_codebook(config.antenna, config.codebook_size, config.grid);

  std::vector<std::uint64_t> seeds;
  std::uint64_t state = config.seed;
  for (Index s = 0; s < config.scenarios; ++s) seeds.push_back(splitmix64(state));

  // Scenarios are independent, so generate them in parallel; results land in
  // fixed slots and the output does not depend on the thread count.
  std::vector<ScenarioData> data(std::size_t(config.scenarios));
  std::atomic<Index> next{0};
  auto worker = [&] {
    for (Index s = next++; s < config.scenarios; s = next++) {
      data[std::size_t(s)] = generate(config, codebook, seeds[std::size_t(s)]);
    }
  };
  const unsigned threads = std::clamp<unsigned>(std::thread::hardware_concurrency(), 1, 16);
  std::vector<std::jthread> pool;
  for (unsigned i = 1; i < threads; ++i) pool.emplace_back(worker);
  worker();
  pool.clear();

  Dataset ds;
  ds.config = config;
  const Index first_val = config.scenarios - validation_scenarios(config.scenarios);
  std::uint64_t offset = kRecordsHeaderBytes;
  for (Index s = 0; s < config.scenarios; ++s) {
    auto& d = data[std::size_t(s)];
    std::vector<std::uint64_t> offsets;
    for (const auto& f : d.frames) {
      offsets.push_back(offset);
      offset += frame_bytes(f);
    }
    for (Index t = config.tau - 1; t + 1 < config.frames; ++t) {
      SampleRecord r;
      r.scenario = s;
      r.t = t;
      r.split = s < first_val ? Split::kTrain : Split::kVal;
      r.offset = offsets[std::size_t(t - config.tau + 1)];
      const LinkLabels& next = d.labels[std::size_t(t + 1)];
      r.beam = next.beam;
      r.link = next.link;
      r.next = d.states[std::size_t(t + 1)];
      for (Index v = 0; v < Index(r.next.vehicles.size()); ++v) r.los_blocked.push_back(los_blocked(r.next, v));
      ds.samples.push_back(std::move(r));
    }
    ds.frames.push_back(std::move(d.frames));
    ds.frame_offsets.push_back(std::move(offsets));
  }
  return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::ofstream rec(dir / "records.bin", std::ios::binary);
  if (!rec) throw std::runtime_error("dataset: cannot open " + (dir / "records.bin").string());
  rec.write(kRecordsMagic, 4);
  rec.write(reinterpret_cast<const char*>(&kRecordsVersion), 4);
  std::uint64_t frame_count = 0;
  for (const auto& s : ds.frames) frame_count += s.size();
  rec.write(reinterpret_cast<const char*>(&frame_count), 8);
  for (std::size_t s = 0; s < ds.frames.size(); ++s) {
    for (std::size_t f = 0; f < ds.frames[s].size(); ++f) {
      if (std::uint64_t(rec.tellp()) != ds.frame_offsets[s][f]) {
        throw std::logic_error("dataset: frame offset table out of sync with payload sizes");
      }
      for (const auto& m : ds.frames[s][f]) write_tensor(rec, TensorF(m.payload.cast<float>()));
    }
  }
  const std::uint64_t total = std::uint64_t(rec.tellp());
  rec.close();
  if (!rec) throw std::runtime_error("dataset: write failed for records.bin");

  nlohmann::json samples = nlohmann::json::array();
  for (const auto& r : ds.samples) {
    nlohmann::json veh = nlohmann::json::array(), blk = nlohmann::json::array();
    for (const auto& b : r.next.vehicles) veh.push_back(box_json(b));
    for (const auto& b : r.next.blockers) blk.push_back(box_json(b));
    samples.push_back({{"scenario", r.scenario},
                       {"t", r.t},
                       {"split", r.split == Split::kTrain ? "train" : "val"},
                       {"offset", r.offset},
                       {"beam", r.beam},
                       {"link", r.link},
                       {"los_blocked", r.los_blocked},
                       {"next_vehicles", veh},
                       {"next_blockers", blk}});
  }
  std::vector<std::string> mods;
  for (auto k : ds.config.modalities) mods.emplace_back(modality_name(k));
  nlohmann::json manifest = {{"format", kDatasetFormat},
                             {"config", ds.config},
                             {"modalities", mods},
                             {"records_bytes", total},
                             {"frame_count", frame_count},
                             {"frame_offsets", ds.frame_offsets},
                             {"sample_count", ds.samples.size()},
                             {"samples", samples}};
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("dataset: cannot open " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    corrupt(FormatErrorKind::kMalformed, std::string("manifest is not valid JSON: ") + e.what());
  }
  const std::string format = m.value("format", "");
  if (format != kDatasetFormat) {
    corrupt(FormatErrorKind::kVersionMismatch, "manifest format '" + format + "', expected " + kDatasetFormat);
  }

  Dataset ds;
  std::uint64_t records_bytes = 0, frame_count = 0;
  try {
    ds.config = m.at("config").get<ScenarioConfig>();
    records_bytes = m.at("records_bytes");
    frame_count = m.at("frame_count");
    ds.frame_offsets = m.at("frame_offsets").get<std::vector<std::vector<std::uint64_t>>>();
    for (const auto& j : m.at("samples")) {
      SampleRecord r;
      r.scenario = j.at("scenario");
      r.t = j.at("t");
      r.split = j.at("split").get<std::string>() == "val" ? Split::kVal : Split::kTrain;
      r.offset = j.at("offset");
      r.beam = j.at("beam");
      r.link = j.at("link").get<std::vector<int>>();
      r.los_blocked = j.at("los_blocked").get<std::vector<bool>>();
      for (const auto& b : j.at("next_vehicles")) r.next.vehicles.push_back(box_from(b));
      for (const auto& b : j.at("next_blockers")) r.next.blockers.push_back(box_from(b));
      ds.samples.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    corrupt(FormatErrorKind::kMalformed, std::string("manifest field: ") + e.what());
  }
  if (m.at("sample_count").get<std::uint64_t>() != ds.samples.size()) {
    corrupt(FormatErrorKind::kCountMismatch, "manifest declares " + m.at("sample_count").dump() + " samples, lists " +
                                                 std::to_string(ds.samples.size()));
  }

  std::ifstream rec(dir / "records.bin", std::ios::binary);
  if (!rec) throw std::runtime_error("dataset: cannot open " + (dir / "records.bin").string());
  const auto file_size = std::uint64_t(std::filesystem::file_size(dir / "records.bin"));
  char magic[4] = {};
  std::uint32_t version = 0;
  std::uint64_t stored_frames = 0;
  rec.read(magic, 4);
  rec.read(reinterpret_cast<char*>(&version), 4);
  rec.read(reinterpret_cast<char*>(&stored_frames), 8);
  if (!rec) corrupt(FormatErrorKind::kTruncated, "records.bin ends inside its header");
  if (!std::equal(magic, magic + 4, kRecordsMagic)) corrupt(FormatErrorKind::kBadMagic, "records.bin magic");
  if (version != kRecordsVersion) {
    corrupt(FormatErrorKind::kVersionMismatch, "records.bin version " + std::to_string(version));
  }
  if (file_size < records_bytes) {
    corrupt(FormatErrorKind::kTruncated, "records.bin has " + std::to_string(file_size) + " bytes, manifest expects " +
                                             std::to_string(records_bytes));
  }
  std::uint64_t listed = 0;
  for (const auto& s : ds.frame_offsets) listed += s.size();
  if (stored_frames != frame_count || listed != frame_count) {
    corrupt(FormatErrorKind::kCountMismatch, "records.bin holds " + std::to_string(stored_frames) +
                                                 " frames, manifest lists " + std::to_string(listed));
  }
  if (Index(ds.frame_offsets.size()) != ds.config.scenarios) {
    corrupt(FormatErrorKind::kCountMismatch, "frame table covers " + std::to_string(ds.frame_offsets.size()) +
                                                 " scenarios, config has " + std::to_string(ds.config.scenarios));
  }

  std::uint64_t expected = kRecordsHeaderBytes;
  const std::size_t per_frame = ds.config.modalities.size();
  for (const auto& offsets : ds.frame_offsets) {
    std::vector<std::vector<ModalityFrame>> scenario;
    for (std::uint64_t off : offsets) {
      if (off != expected) {
        corrupt(FormatErrorKind::kOffsetCorrupt,
                "frame at offset " + std::to_string(off) + ", payload ends at " + std::to_string(expected));
      }
      std::vector<ModalityFrame> frame;
      for (std::size_t k = 0; k < per_frame; ++k) {
        frame.push_back({ds.config.modalities[k], read_tensor(rec), 0});
      }
      expected = std::uint64_t(rec.tellg());
      scenario.push_back(std::move(frame));
    }
    ds.frames.push_back(std::move(scenario));
  }

  std::uint64_t previous = 0;
  for (const auto& r : ds.samples) {
    const bool in_range = r.scenario >= 0 && r.scenario < Index(ds.frames.size()) && r.t - ds.config.tau + 1 >= 0 &&
                          r.t + 1 < Index(ds.frame_offsets[std::size_t(r.scenario)].size());
    if (!in_range || r.offset <= previous ||
        r.offset != ds.frame_offsets[std::size_t(r.scenario)][std::size_t(r.t - ds.config.tau + 1)]) {
      corrupt(FormatErrorKind::kOffsetCorrupt, "sample offset " + std::to_string(r.offset) + " (scenario " +
                                                   std::to_string(r.scenario) + ", t " + std::to_string(r.t) + ")");
    }
    previous = r.offset;
  }
  return ds;
}

}  // namespace tokenflow

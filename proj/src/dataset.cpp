#include "prvr/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "prvr/features_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace prvr {

const VideoRecord& Dataset::video_by_id(const std::string& id) const {
    int idx = video_index(id);
    if (idx < 0) throw std::invalid_argument("dataset: unknown video_id '" + id + "'");
    return videos[static_cast<size_t>(idx)];
}

int Dataset::video_index(const std::string& id) const {
    build_index();
    auto it = index_.find(id);
    return it == index_.end() ? -1 : it->second;
}

void Dataset::build_index() const {
    if (index_.size() == videos.size() && !videos.empty()) return;
    index_.clear();
    for (size_t i = 0; i < videos.size(); ++i) index_[videos[i].video_id] = static_cast<int>(i);
}

void Dataset::validate() const {
    std::vector<std::string> errors;
    std::set<std::string> seen;
    for (const auto& v : videos) {
        if (!seen.insert(v.video_id).second) {
            errors.push_back("duplicate video_id '" + v.video_id + "'");
        }
        if (v.frames.rank() != 2 || v.frames.rows() < 1) {
            errors.push_back("video '" + v.video_id + "' has invalid frame shape " +
                             shape_str(v.frames.shape()));
        } else if (v.frames.cols() != d_v) {
            errors.push_back("video '" + v.video_id + "' has feature dim " +
                             std::to_string(v.frames.cols()) + ", expected " +
                             std::to_string(d_v));
        }
    }
    for (const auto& q : queries) {
        if (video_index(q.video_id) < 0) {
            errors.push_back("query '" + q.query_id + "' references missing video '" +
                             q.video_id + "'");
        }
        if (q.words.rank() != 2 || q.words.rows() < 2) {
            errors.push_back("query '" + q.query_id + "' needs at least 2 word rows, got shape " +
                             shape_str(q.words.shape()));
        } else if (q.words.cols() != d_q) {
            errors.push_back("query '" + q.query_id + "' has word dim " +
                             std::to_string(q.words.cols()) + ", expected " + std::to_string(d_q));
        }
        if (q.teacher_eos.numel() == 0) {
            errors.push_back("query '" + q.query_id + "' is missing its teacher embedding");
        } else if (!queries.empty() && q.teacher_eos.numel() != queries.front().teacher_eos.numel()) {
            errors.push_back("query '" + q.query_id + "' has teacher dim " +
                             std::to_string(q.teacher_eos.numel()) + ", expected " +
                             std::to_string(queries.front().teacher_eos.numel()));
        }
    }
    if (!errors.empty()) {
        std::ostringstream os;
        os << "dataset validation failed (" << errors.size() << " problem(s)):";
        for (const auto& e : errors) os << "\n  - " << e;
        throw std::invalid_argument(os.str());
    }
}

namespace {

Tensor load_vector_file(const std::string& path) {
    Tensor m = load_features(path);
    if (m.rows() != 1) {
        throw IoError(path + ": expected a single-row vector, got " + shape_str(m.shape()));
    }
    return Tensor::vec(m.data());
}

}  // namespace

Dataset load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(path + ": cannot open");
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw IoError(path + ": invalid JSON: " + e.what());
    }
    fs::path base = fs::path(path).parent_path();
    auto resolve = [&](const std::string& rel) { return (base / rel).string(); };

    Dataset ds;
    const auto& meta = doc.at("meta");
    ds.d_v = meta.at("d_v").get<size_t>();
    ds.d_q = meta.at("d_q").get<size_t>();
    ds.split = meta.at("split").get<std::string>();
    for (const auto& v : doc.at("videos")) {
        VideoRecord rec;
        rec.video_id = v.at("id").get<std::string>();
        rec.frames = load_features(resolve(v.at("feature_path").get<std::string>()));
        ds.videos.push_back(std::move(rec));
    }
    for (const auto& q : doc.at("queries")) {
        QueryRecord rec;
        rec.query_id = q.at("id").get<std::string>();
        rec.video_id = q.at("video_id").get<std::string>();
        rec.words = load_features(resolve(q.at("feature_path").get<std::string>()));
        rec.teacher_eos = load_vector_file(resolve(q.at("teacher_eos_path").get<std::string>()));
        if (q.contains("gt_span")) {
            rec.gt_span = {q["gt_span"].at(0).get<int>(), q["gt_span"].at(1).get<int>()};
        }
        ds.queries.push_back(std::move(rec));
    }
    ds.validate();
    return ds;
}

std::string save_dataset(const Dataset& ds, const std::string& dir,
                         const std::string& manifest_name) {
    fs::create_directories(fs::path(dir) / "videos");
    fs::create_directories(fs::path(dir) / "queries");
    json doc;
    doc["meta"] = {{"d_v", ds.d_v}, {"d_q", ds.d_q}, {"split", ds.split}};
    doc["videos"] = json::array();
    for (const auto& v : ds.videos) {
        std::string rel = "videos/" + v.video_id + ".prvf";
        write_features((fs::path(dir) / rel).string(), v.frames);
        doc["videos"].push_back({{"id", v.video_id}, {"feature_path", rel}});
    }
    doc["queries"] = json::array();
    for (const auto& q : ds.queries) {
        std::string rel = "queries/" + q.query_id + ".prvf";
        std::string rel_eos = "queries/" + q.query_id + ".eos.prvf";
        write_features((fs::path(dir) / rel).string(), q.words);
        write_features((fs::path(dir) / rel_eos).string(),
                       Tensor::matrix(1, q.teacher_eos.numel(), q.teacher_eos.data()));
        json jq = {{"id", q.query_id},
                   {"video_id", q.video_id},
                   {"feature_path", rel},
                   {"teacher_eos_path", rel_eos}};
        if (q.gt_span) jq["gt_span"] = {q.gt_span->first, q.gt_span->second};
        doc["queries"].push_back(std::move(jq));
    }
    std::string manifest_path = (fs::path(dir) / manifest_name).string();
    std::ofstream os(manifest_path, std::ios::trunc);
    if (!os) throw IoError(manifest_path + ": cannot open for writing");
    os << doc.dump(2) << "\n";
    return manifest_path;
}

}  // namespace prvr

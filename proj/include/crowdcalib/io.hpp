#pragma once

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crowdcalib/pipeline.hpp"
#include "crowdcalib/synthetic.hpp"
#include "crowdcalib/types.hpp"

namespace crowdcalib {

using json = nlohmann::json;

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& context) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE)
    throw Error(ErrorCode::IoError, context + ": bad number '" + s + "'");
  return v;
}

inline long parse_int(const std::string& s, const std::string& context) {
  errno = 0;
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE)
    throw Error(ErrorCode::IoError, context + ": bad integer '" + s + "'");
  return v;
}

// Writes via a temporary file and rename, so readers never see a
// partially written report.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + tmp.string() + " for writing");
    out << content;
    if (!out) throw Error(ErrorCode::IoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json parse_json_file(const std::filesystem::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, path.string() + ": " + e.what());
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace detail

// --- intrinsics ------------------------------------------------------

inline json intrinsics_to_json(const std::map<int, CameraIntrinsics>& cams) {
  json arr = json::array();
  for (const auto& [id, k] : cams) {
    json j{{"id", id},          {"fx", k.fx},       {"fy", k.fy},
           {"cx", k.cx},        {"cy", k.cy},       {"width", k.width},
           {"height", k.height}};
    j["dist"] = k.dist;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline std::map<int, CameraIntrinsics> intrinsics_from_json(const json& arr) {
  if (!arr.is_array()) throw Error(ErrorCode::ConfigError, "intrinsics: expected an array");
  std::map<int, CameraIntrinsics> out;
  for (const auto& j : arr) {
    try {
      CameraIntrinsics k;
      const int id = j.at("id").get<int>();
      k.fx = j.at("fx").get<double>();
      k.fy = j.at("fy").get<double>();
      k.cx = j.at("cx").get<double>();
      k.cy = j.at("cy").get<double>();
      k.width = j.at("width").get<int>();
      k.height = j.at("height").get<int>();
      if (j.contains("dist")) {
        const auto d = j.at("dist").get<std::vector<double>>();
        if (d.size() != 5)
          throw Error(ErrorCode::ConfigError, "intrinsics: dist must have 5 entries");
        std::copy(d.begin(), d.end(), k.dist.begin());
      }
      k.validate();
      if (!out.emplace(id, k).second)
        throw Error(ErrorCode::ConfigError, "intrinsics: duplicate camera id " + std::to_string(id));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigError, std::string("intrinsics: ") + e.what());
    }
  }
  return out;
}

inline void write_intrinsics(const std::filesystem::path& path,
                             const std::map<int, CameraIntrinsics>& cams) {
  write_text_atomic(path, intrinsics_to_json(cams).dump(2) + "\n");
}

inline std::map<int, CameraIntrinsics> read_intrinsics(const std::filesystem::path& path) {
  return intrinsics_from_json(parse_json_file(path));
}

// --- poses -----------------------------------------------------------

struct PosesFile {
  int reference = 0;
  std::map<int, PoseSE3> poses;
};

inline json poses_to_json(const std::map<int, PoseSE3>& poses, int reference) {
  json cams = json::object();
  for (const auto& [id, pose] : poses) {
    json r = json::array();
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 3; ++col) r.push_back(pose.rotation(row, col));
    cams[std::to_string(id)] = {{"R", std::move(r)},
                                {"t", {pose.translation.x(), pose.translation.y(),
                                       pose.translation.z()}},
                                {"metric", pose.metric}};
  }
  return json{{"reference", reference}, {"cameras", std::move(cams)}};
}

inline PosesFile poses_from_json(const json& j) {
  PosesFile out;
  try {
    out.reference = j.value("reference", 0);
    for (const auto& [key, cam] : j.at("cameras").items()) {
      PoseSE3 pose;
      const auto r = cam.at("R").get<std::vector<double>>();
      const auto t = cam.at("t").get<std::vector<double>>();
      if (r.size() != 9 || t.size() != 3)
        throw Error(ErrorCode::ConfigError, "poses: R must have 9 entries and t 3");
      for (int row = 0; row < 3; ++row)
        for (int col = 0; col < 3; ++col) pose.rotation(row, col) = r[3 * row + col];
      pose.translation = {t[0], t[1], t[2]};
      pose.metric = cam.value("metric", false);
      if ((pose.rotation * pose.rotation.transpose() - Eigen::Matrix3d::Identity()).norm() > 1e-6 ||
          std::abs(pose.rotation.determinant() - 1.0) > 1e-6)
        throw Error(ErrorCode::ConfigError, "poses: R of camera " + key + " is not a rotation");
      out.poses.emplace(static_cast<int>(parse_int(key, "poses camera id")), pose);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("poses: ") + e.what());
  }
  return out;
}

inline void write_poses(const std::filesystem::path& path, const std::map<int, PoseSE3>& poses,
                        int reference) {
  write_text_atomic(path, poses_to_json(poses, reference).dump(2) + "\n");
}

inline PosesFile read_poses(const std::filesystem::path& path) {
  return poses_from_json(parse_json_file(path));
}

// --- tracks ----------------------------------------------------------

// One camera's detections: frame,personId,uTl,vTl,uBr,vBr
inline void write_tracks(const std::filesystem::path& path,
                         const std::vector<Tracklet>& tracklets) {
  std::vector<const BBox*> boxes;
  for (const auto& t : tracklets)
    for (const auto& b : t.boxes) boxes.push_back(&b);
  std::sort(boxes.begin(), boxes.end(), [](const BBox* x, const BBox* y) {
    return std::tie(x->frame, x->person_id) < std::tie(y->frame, y->person_id);
  });
  std::string out = "frame,personId,uTl,vTl,uBr,vBr\n";
  for (const BBox* b : boxes) {
    out += std::to_string(b->frame) + "," + std::to_string(b->person_id) + "," +
           format_double(b->u_tl) + "," + format_double(b->v_tl) + "," + format_double(b->u_br) +
           "," + format_double(b->v_br) + "\n";
  }
  write_text_atomic(path, out);
}

inline std::vector<Tracklet> read_tracks(const std::filesystem::path& path, int camera_id) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::map<int, Tracklet> per_person;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line_no == 1 && line.rfind("frame,", 0) == 0) continue;
    const auto fields = detail::split_csv_line(line);
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 6) throw Error(ErrorCode::IoError, ctx + ": expected 6 columns");
    BBox b;
    b.frame = static_cast<int>(parse_int(fields[0], ctx));
    b.person_id = static_cast<int>(parse_int(fields[1], ctx));
    b.u_tl = parse_double(fields[2], ctx);
    b.v_tl = parse_double(fields[3], ctx);
    b.u_br = parse_double(fields[4], ctx);
    b.v_br = parse_double(fields[5], ctx);
    b.camera_id = camera_id;
    if (!b.valid()) throw Error(ErrorCode::IoError, ctx + ": inverted box corners");
    auto [it, inserted] = per_person.try_emplace(b.person_id);
    if (inserted) {
      it->second.camera_id = camera_id;
      it->second.person_id = b.person_id;
    }
    it->second.boxes.push_back(b);
  }
  std::vector<Tracklet> out;
  out.reserve(per_person.size());
  for (auto& [id, t] : per_person) {
    std::sort(t.boxes.begin(), t.boxes.end(),
              [](const BBox& x, const BBox& y) { return x.frame < y.frame; });
    out.push_back(std::move(t));
  }
  return out;
}

// --- embeddings ------------------------------------------------------

// Per-detection appearance features: a "dim,D" header, then
// frame,personId,e0..e{D-1} rows matching the track file.
inline void write_embeddings(const std::filesystem::path& path,
                             const std::vector<Tracklet>& tracklets) {
  int dim = -1;
  for (const auto& t : tracklets)
    if (t.has_embeddings() && !t.embeddings.empty()) {
      dim = static_cast<int>(t.embeddings.front().size());
      break;
    }
  if (dim < 0)
    throw Error(ErrorCode::MissingFeature, "write_embeddings: tracklets carry no embeddings");
  std::string out = "dim," + std::to_string(dim) + "\n";
  for (const auto& t : tracklets) {
    if (!t.has_embeddings())
      throw Error(ErrorCode::MissingFeature,
                  "write_embeddings: person " + std::to_string(t.person_id) + " lacks embeddings");
    for (std::size_t i = 0; i < t.boxes.size(); ++i) {
      out += std::to_string(t.boxes[i].frame) + "," + std::to_string(t.person_id);
      for (int d = 0; d < dim; ++d) out += "," + format_double(t.embeddings[i](d));
      out += "\n";
    }
  }
  write_text_atomic(path, out);
}

// Attaches embeddings to tracklets read from the matching track file.
inline void read_embeddings(const std::filesystem::path& path, std::vector<Tracklet>& tracklets) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::IoError, path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  if (header.size() != 2 || header[0] != "dim")
    throw Error(ErrorCode::IoError, path.string() + ": first line must be 'dim,<D>'");
  const int dim = static_cast<int>(parse_int(header[1], path.string() + " header"));
  if (dim < 1) throw Error(ErrorCode::IoError, path.string() + ": non-positive dimension");

  std::map<std::pair<int, int>, Eigen::VectorXd> rows;  // (person, frame) -> embedding
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto fields = detail::split_csv_line(line);
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    if (static_cast<int>(fields.size()) != dim + 2)
      throw Error(ErrorCode::IoError, ctx + ": expected " + std::to_string(dim + 2) + " columns");
    const int frame = static_cast<int>(parse_int(fields[0], ctx));
    const int person = static_cast<int>(parse_int(fields[1], ctx));
    Eigen::VectorXd e(dim);
    for (int d = 0; d < dim; ++d) e(d) = parse_double(fields[d + 2], ctx);
    if (!rows.emplace(std::make_pair(person, frame), std::move(e)).second)
      throw Error(ErrorCode::IoError, ctx + ": duplicate embedding row");
  }

  for (auto& t : tracklets) {
    t.embeddings.clear();
    t.embeddings.reserve(t.boxes.size());
    for (const auto& b : t.boxes) {
      const auto it = rows.find({t.person_id, b.frame});
      if (it == rows.end())
        throw Error(ErrorCode::IoError,
                    path.string() + ": no embedding for person " + std::to_string(t.person_id) +
                        " frame " + std::to_string(b.frame));
      t.embeddings.push_back(it->second);
    }
  }
}

// --- scale priors ----------------------------------------------------

inline json priors_to_json(const std::vector<ScalePriorObs>& priors) {
  json arr = json::array();
  for (const auto& p : priors) {
    json pixels = json::object();
    for (const auto& [cam, endpoints] : p.pixels)
      pixels[std::to_string(cam)] = {{endpoints.first.x(), endpoints.first.y()},
                                     {endpoints.second.x(), endpoints.second.y()}};
    arr.push_back(json{{"length", p.length}, {"pixels", std::move(pixels)}});
  }
  return arr;
}

inline std::vector<ScalePriorObs> priors_from_json(const json& arr) {
  if (!arr.is_array()) throw Error(ErrorCode::ConfigError, "priors: expected an array");
  std::vector<ScalePriorObs> out;
  for (const auto& j : arr) {
    try {
      ScalePriorObs p;
      p.length = j.at("length").get<double>();
      if (!(p.length > 0.0))
        throw Error(ErrorCode::ConfigError, "priors: length must be positive");
      for (const auto& [key, endpoints] : j.at("pixels").items()) {
        const auto e = endpoints.get<std::vector<std::vector<double>>>();
        if (e.size() != 2 || e[0].size() != 2 || e[1].size() != 2)
          throw Error(ErrorCode::ConfigError, "priors: endpoints must be two [u,v] pairs");
        p.pixels[static_cast<int>(parse_int(key, "priors camera id"))] = {
            Eigen::Vector2d(e[0][0], e[0][1]), Eigen::Vector2d(e[1][0], e[1][1])};
      }
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigError, std::string("priors: ") + e.what());
    }
  }
  return out;
}

inline void write_priors(const std::filesystem::path& path,
                         const std::vector<ScalePriorObs>& priors) {
  write_text_atomic(path, priors_to_json(priors).dump(2) + "\n");
}

inline std::vector<ScalePriorObs> read_priors(const std::filesystem::path& path) {
  return priors_from_json(parse_json_file(path));
}

// --- annotated evaluation pairs --------------------------------------

inline json annotated_to_json(
    const std::map<std::pair<int, int>, std::vector<PointPair>>& annotated) {
  json arr = json::array();
  for (const auto& [pair_key, pairs] : annotated) {
    json list = json::array();
    for (const auto& pp : pairs)
      list.push_back(json{{"a", {pp.a.x(), pp.a.y()}}, {"b", {pp.b.x(), pp.b.y()}}});
    arr.push_back(json{{"camA", pair_key.first}, {"camB", pair_key.second},
                       {"pairs", std::move(list)}});
  }
  return arr;
}

inline std::map<std::pair<int, int>, std::vector<PointPair>> annotated_from_json(const json& arr) {
  if (!arr.is_array()) throw Error(ErrorCode::ConfigError, "annotated: expected an array");
  std::map<std::pair<int, int>, std::vector<PointPair>> out;
  for (const auto& j : arr) {
    try {
      const int cam_a = j.at("camA").get<int>();
      const int cam_b = j.at("camB").get<int>();
      auto& list = out[{cam_a, cam_b}];
      for (const auto& e : j.at("pairs")) {
        const auto a = e.at("a").get<std::vector<double>>();
        const auto b = e.at("b").get<std::vector<double>>();
        if (a.size() != 2 || b.size() != 2)
          throw Error(ErrorCode::ConfigError, "annotated: points must be [u,v]");
        PointPair pp;
        pp.a = {a[0], a[1]};
        pp.b = {b[0], b[1]};
        list.push_back(pp);
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigError, std::string("annotated: ") + e.what());
    }
  }
  return out;
}

inline void write_annotated(const std::filesystem::path& path,
                            const std::map<std::pair<int, int>, std::vector<PointPair>>& annotated) {
  write_text_atomic(path, annotated_to_json(annotated).dump(2) + "\n");
}

inline std::map<std::pair<int, int>, std::vector<PointPair>> read_annotated(
    const std::filesystem::path& path) {
  return annotated_from_json(parse_json_file(path));
}

// --- configuration ---------------------------------------------------

inline SceneSpec scene_spec_from_json(const json& j) {
  SceneSpec s;
  try {
    s.n_cameras = j.value("n_cameras", s.n_cameras);
    s.n_people = j.value("n_people", s.n_people);
    s.n_frames = j.value("n_frames", s.n_frames);
    s.extent_x = j.value("extent_x", s.extent_x);
    s.extent_y = j.value("extent_y", s.extent_y);
    s.camera_height = j.value("camera_height", s.camera_height);
    s.walk_speed = j.value("walk_speed", s.walk_speed);
    s.fps = j.value("fps", s.fps);
    s.body_height = j.value("body_height", s.body_height);
    s.body_mass_fraction = j.value("body_mass_fraction", s.body_mass_fraction);
    s.height_jitter = j.value("height_jitter", s.height_jitter);
    s.mass_bounce_sigma = j.value("mass_bounce_sigma", s.mass_bounce_sigma);
    s.pixel_noise_sigma = j.value("pixel_noise_sigma", s.pixel_noise_sigma);
    s.center_offset_px = j.value("center_offset_px", s.center_offset_px);
    s.embedding_dim = j.value("embedding_dim", s.embedding_dim);
    s.embedding_noise_sigma = j.value("embedding_noise_sigma", s.embedding_noise_sigma);
    s.image_width = j.value("image_width", s.image_width);
    s.image_height = j.value("image_height", s.image_height);
    s.focal = j.value("focal", s.focal);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("scene: ") + e.what());
  }
  s.validate();
  return s;
}

inline json scene_spec_to_json(const SceneSpec& s) {
  return json{{"n_cameras", s.n_cameras},
              {"n_people", s.n_people},
              {"n_frames", s.n_frames},
              {"extent_x", s.extent_x},
              {"extent_y", s.extent_y},
              {"camera_height", s.camera_height},
              {"walk_speed", s.walk_speed},
              {"fps", s.fps},
              {"body_height", s.body_height},
              {"body_mass_fraction", s.body_mass_fraction},
              {"height_jitter", s.height_jitter},
              {"mass_bounce_sigma", s.mass_bounce_sigma},
              {"pixel_noise_sigma", s.pixel_noise_sigma},
              {"center_offset_px", s.center_offset_px},
              {"embedding_dim", s.embedding_dim},
              {"embedding_noise_sigma", s.embedding_noise_sigma},
              {"image_width", s.image_width},
              {"image_height", s.image_height},
              {"focal", s.focal},
              {"seed", s.seed}};
}

inline PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  try {
    c.reference_camera = j.value("reference_camera", c.reference_camera);
    c.seed = j.value("seed", c.seed);
    c.max_correspondences = j.value("max_correspondences", c.max_correspondences);
    if (j.contains("association")) {
      const json& a = j.at("association");
      c.association.sample_size = a.value("sample_size", c.association.sample_size);
      if (a.contains("max_cost")) c.association.max_cost = a.at("max_cost").get<double>();
    }
    if (j.contains("correspondence")) {
      const json& s = j.at("correspondence");
      c.correspondence.frame_stride = s.value("frame_stride", c.correspondence.frame_stride);
      c.correspondence.min_motion_px = s.value("min_motion_px", c.correspondence.min_motion_px);
    }
    if (j.contains("ransac")) {
      const json& r = j.at("ransac");
      c.ransac.threshold_px = r.value("threshold_px", c.ransac.threshold_px);
      c.ransac.confidence = r.value("confidence", c.ransac.confidence);
      c.ransac.max_iters = r.value("max_iters", c.ransac.max_iters);
    }
    if (j.contains("lm")) {
      const json& l = j.at("lm");
      c.lm.max_iters = l.value("max_iters", c.lm.max_iters);
      c.lm.cost_tolerance = l.value("cost_tolerance", c.lm.cost_tolerance);
      c.lm.param_tolerance = l.value("param_tolerance", c.lm.param_tolerance);
      c.lm.initial_damping = l.value("initial_damping", c.lm.initial_damping);
      if (l.contains("huber_scale_px")) {
        if (l.at("huber_scale_px").is_null())
          c.lm.huber_scale_px.reset();
        else
          c.lm.huber_scale_px = l.at("huber_scale_px").get<double>();
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("pipeline config: ") + e.what());
  }
  if (c.association.sample_size < 1 || c.correspondence.frame_stride < 1 ||
      !(c.ransac.threshold_px > 0.0) || c.ransac.max_iters < 1 || c.lm.max_iters < 1 ||
      !(c.ransac.confidence > 0.0) || !(c.ransac.confidence < 1.0))
    throw Error(ErrorCode::ConfigError, "pipeline config: parameter out of range");
  return c;
}

inline json pipeline_config_to_json(const PipelineConfig& c) {
  json j{{"reference_camera", c.reference_camera},
         {"seed", c.seed},
         {"max_correspondences", c.max_correspondences},
         {"association",
          {{"sample_size", c.association.sample_size}}},
         {"correspondence",
          {{"frame_stride", c.correspondence.frame_stride},
           {"min_motion_px", c.correspondence.min_motion_px}}},
         {"ransac",
          {{"threshold_px", c.ransac.threshold_px},
           {"confidence", c.ransac.confidence},
           {"max_iters", c.ransac.max_iters}}},
         {"lm",
          {{"max_iters", c.lm.max_iters},
           {"cost_tolerance", c.lm.cost_tolerance},
           {"param_tolerance", c.lm.param_tolerance},
           {"initial_damping", c.lm.initial_damping}}}};
  if (c.association.max_cost) j["association"]["max_cost"] = *c.association.max_cost;
  if (c.lm.huber_scale_px)
    j["lm"]["huber_scale_px"] = *c.lm.huber_scale_px;
  else
    j["lm"]["huber_scale_px"] = nullptr;
  return j;
}

// --- dataset directory -----------------------------------------------

// Layout written by the synth command and consumed by calibrate/eval:
// intrinsics.json, tracks_cam<ID>.csv, embeddings_cam<ID>.csv,
// priors.json, annotated.json, gt_poses.json, scene.json.
inline std::filesystem::path tracks_path(const std::filesystem::path& dir, int cam) {
  return dir / ("tracks_cam" + std::to_string(cam) + ".csv");
}

inline std::filesystem::path embeddings_path(const std::filesystem::path& dir, int cam) {
  return dir / ("embeddings_cam" + std::to_string(cam) + ".csv");
}

inline void write_dataset(const std::filesystem::path& dir, const GroundTruth& gt,
                          const RenderedScene& scene) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  std::map<int, CameraIntrinsics> intrinsics;
  for (int c = 0; c < static_cast<int>(gt.intrinsics.size()); ++c)
    intrinsics.emplace(c, gt.intrinsics[c]);
  write_intrinsics(dir / "intrinsics.json", intrinsics);
  for (int c = 0; c < static_cast<int>(scene.tracklets.size()); ++c) {
    write_tracks(tracks_path(dir, c), scene.tracklets[c]);
    write_embeddings(embeddings_path(dir, c), scene.tracklets[c]);
  }
  write_priors(dir / "priors.json", scene.priors);
  write_annotated(dir / "annotated.json", scene.annotated);
  write_poses(dir / "gt_poses.json", gt.poses_in_reference(), 0);
  write_text_atomic(dir / "scene.json", scene_spec_to_json(gt.spec).dump(2) + "\n");
}

// Loads everything calibrate needs from a dataset directory.
inline CalibrationInput read_dataset(const std::filesystem::path& dir,
                                     const PipelineConfig& config) {
  CalibrationInput input;
  input.config = config;
  const auto intrinsics = read_intrinsics(dir / "intrinsics.json");
  if (intrinsics.empty())
    throw Error(ErrorCode::ConfigError, dir.string() + ": intrinsics.json lists no cameras");
  for (const auto& [id, k] : intrinsics) {
    CameraData cam;
    cam.intrinsics = k;
    cam.tracklets = read_tracks(tracks_path(dir, id), id);
    const auto emb = embeddings_path(dir, id);
    if (std::filesystem::exists(emb)) read_embeddings(emb, cam.tracklets);
    input.cameras.emplace(id, std::move(cam));
  }
  const auto priors_file = dir / "priors.json";
  if (std::filesystem::exists(priors_file)) input.priors = read_priors(priors_file);
  return input;
}

// --- report CSVs -----------------------------------------------------

inline void write_cost_trace(const std::filesystem::path& path,
                             const CalibrationResult& result) {
  std::string out = "stage,iteration,cost\n";
  for (const auto& [pair_key, report] : result.pair_reports) {
    const std::string stage =
        "local_" + std::to_string(pair_key.first) + "_" + std::to_string(pair_key.second);
    for (std::size_t i = 0; i < report.local_cost_trace.size(); ++i)
      out += stage + "," + std::to_string(i) + "," + format_double(report.local_cost_trace[i]) +
             "\n";
  }
  for (std::size_t i = 0; i < result.global_cost_trace.size(); ++i)
    out += "global," + std::to_string(i) + "," + format_double(result.global_cost_trace[i]) + "\n";
  write_text_atomic(path, out);
}

inline void write_study_rows(const std::filesystem::path& path,
                             const std::vector<StudyRow>& rows, const std::string& level_name) {
  std::string out =
      level_name + ",ok,mean_position_mm,mean_rotation_deg,max_position_mm,max_rotation_deg,message\n";
  for (const auto& r : rows) {
    out += format_double(r.level) + "," + (r.ok ? "1" : "0") + "," +
           format_double(r.mean_position_mm) + "," + format_double(r.mean_rotation_deg) + "," +
           format_double(r.max_position_mm) + "," + format_double(r.max_rotation_deg) + ",\"" +
           r.message + "\"\n";
  }
  write_text_atomic(path, out);
}

inline void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  std::string out = "frame,x,y,z\n";
  for (std::size_t i = 0; i < traj.frames.size(); ++i) {
    const Eigen::Vector3d& p = traj.positions[i];
    out += std::to_string(traj.frames[i]) + "," + format_double(p.x()) + "," +
           format_double(p.y()) + "," + format_double(p.z()) + "\n";
  }
  write_text_atomic(path, out);
}

inline json calibration_report_json(const CalibrationResult& result) {
  json pairs = json::array();
  for (const auto& [pair_key, r] : result.pair_reports) {
    pairs.push_back(json{{"camA", r.cam_a},
                         {"camB", r.cam_b},
                         {"nCorrespondences", r.n_correspondences},
                         {"nDroppedNormalization", r.n_dropped_normalization},
                         {"nInliers", r.n_inliers},
                         {"nTriangulated", r.n_triangulated},
                         {"ransacIterations", r.ransac_iterations},
                         {"meanInlierSampsonPx", r.mean_inlier_sampson_px},
                         {"scale", r.scale},
                         {"localCostInitial", r.local_cost_trace.front()},
                         {"localCostFinal", r.local_cost_trace.back()}});
  }
  return json{{"referenceCamera", result.reference_camera},
              {"nPoints", result.points.size()},
              {"globalCostInitial", result.global_cost_trace.front()},
              {"globalCostFinal", result.global_cost_trace.back()},
              {"globalAcceptedSteps", result.global_accepted_steps},
              {"pairs", std::move(pairs)},
              {"config", pipeline_config_to_json(result.config)}};
}

}  // namespace crowdcalib

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crowdcalib/geometry.hpp"
#include "crowdcalib/random.hpp"
#include "crowdcalib/types.hpp"

namespace crowdcalib {

struct SceneSpec {
  int n_cameras = 4;
  int n_people = 8;
  int n_frames = 500;
  double extent_x = 20.0;  // walkable area, meters
  double extent_y = 25.0;
  double camera_height = 2.5;
  double walk_speed = 1.2;  // m/s
  double fps = 25.0;
  double body_height = 1.75;
  double body_mass_fraction = 0.55;  // mass point height as a fraction of body height
  double height_jitter = 0.04;       // per-person height spread (fraction of body_height)
  double mass_bounce_sigma = 0.02;   // per-frame gait bounce of the mass point, meters
  double pixel_noise_sigma = 0.0;    // Gaussian noise on box centers, px
  double center_offset_px = 0.0;     // uniform disc offset of the box center, px
  int embedding_dim = 32;
  double embedding_noise_sigma = 0.05;
  // Fraction of people whose identity vectors are exchanged pairwise in
  // every camera except the first, planting wrong associations against
  // that camera.
  double swap_fraction = 0.0;
  int image_width = 720;
  int image_height = 576;
  double focal = 450.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_cameras < 2) throw Error(ErrorCode::ConfigError, "SceneSpec: need at least 2 cameras");
    if (n_people < 1 || n_frames < 1)
      throw Error(ErrorCode::ConfigError, "SceneSpec: need at least one person and one frame");
    if (!(extent_x > 0.0) || !(extent_y > 0.0))
      throw Error(ErrorCode::ConfigError, "SceneSpec: extents must be positive");
    if (!(fps > 0.0) || walk_speed < 0.0)
      throw Error(ErrorCode::ConfigError, "SceneSpec: bad motion parameters");
    if (!(body_height > 0.0) || !(body_mass_fraction > 0.0) || body_mass_fraction >= 1.0)
      throw Error(ErrorCode::ConfigError, "SceneSpec: bad body parameters");
    if (pixel_noise_sigma < 0.0 || center_offset_px < 0.0 || embedding_noise_sigma < 0.0 ||
        height_jitter < 0.0 || mass_bounce_sigma < 0.0)
      throw Error(ErrorCode::ConfigError, "SceneSpec: noise magnitudes must be non-negative");
    if (swap_fraction < 0.0 || swap_fraction > 1.0)
      throw Error(ErrorCode::ConfigError, "SceneSpec: swap_fraction must be in [0, 1]");
    if (embedding_dim < 2) throw Error(ErrorCode::ConfigError, "SceneSpec: embedding_dim too small");
    if (image_width < 16 || image_height < 16 || !(focal > 0.0))
      throw Error(ErrorCode::ConfigError, "SceneSpec: bad camera parameters");
  }
};

struct GroundTruth {
  SceneSpec spec;
  std::vector<PoseSE3> world_to_cam;  // metric
  std::vector<CameraIntrinsics> intrinsics;
  std::vector<double> heights;  // actual per-person body heights
  // [person][frame] position on the ground plane
  std::vector<std::vector<Eigen::Vector2d>> ground_positions;
  // [person][frame] height of the body mass point (includes gait bounce)
  std::vector<std::vector<double>> mass_heights;

  Eigen::Vector3d body_mass_world(int person, int frame) const {
    const Eigen::Vector2d& g = ground_positions[person][frame];
    return {g.x(), g.y(), mass_heights[person][frame]};
  }

  // Pose of a camera expressed relative to camera 0.
  PoseSE3 cam_in_reference(int cam) const {
    PoseSE3 p = world_to_cam[cam].compose(world_to_cam[0].inverse());
    p.metric = true;
    return p;
  }

  std::map<int, PoseSE3> poses_in_reference() const {
    std::map<int, PoseSE3> out;
    for (int c = 0; c < static_cast<int>(world_to_cam.size()); ++c)
      out.emplace(c, cam_in_reference(c));
    return out;
  }
};

namespace detail {

// World-to-camera pose looking from eye toward target, world z up,
// camera y pointing down in the image.
inline PoseSE3 look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
  const Eigen::Vector3d z_c = (target - eye).normalized();
  Eigen::Vector3d x_c = z_c.cross(Eigen::Vector3d::UnitZ());
  const double n = x_c.norm();
  if (n < 1e-9)
    throw Error(ErrorCode::DegenerateConfiguration, "look_at: view direction parallel to up");
  x_c /= n;
  const Eigen::Vector3d y_c = z_c.cross(x_c);
  PoseSE3 pose;
  pose.rotation.row(0) = x_c;
  pose.rotation.row(1) = y_c;
  pose.rotation.row(2) = z_c;
  pose.translation = -pose.rotation * eye;
  pose.metric = true;
  return pose;
}

}  // namespace detail

// Cameras on an ellipse around the walkable area looking inward, and
// smoothed random walks on the ground plane: heading diffuses, speed
// jitters, walls reflect.
inline GroundTruth generate_scene(const SceneSpec& spec) {
  spec.validate();
  GroundTruth gt;
  gt.spec = spec;

  Rng cam_rng(derive_seed(spec.seed, 2));
  const double a = 0.5 * spec.extent_x + 2.0;
  const double b = 0.5 * spec.extent_y + 2.0;
  for (int c = 0; c < spec.n_cameras; ++c) {
    const double theta =
        2.0 * M_PI * c / spec.n_cameras + cam_rng.uniform(-0.08, 0.08);
    const Eigen::Vector3d eye(a * std::cos(theta), b * std::sin(theta),
                              spec.camera_height + cam_rng.uniform(-0.2, 0.2));
    gt.world_to_cam.push_back(detail::look_at(eye, Eigen::Vector3d(0.0, 0.0, 1.0)));

    CameraIntrinsics k;
    k.fx = spec.focal * (1.0 + cam_rng.uniform(-0.03, 0.03));
    k.fy = k.fx * (1.0 + cam_rng.uniform(-0.002, 0.002));
    k.cx = 0.5 * spec.image_width + cam_rng.uniform(-2.0, 2.0);
    k.cy = 0.5 * spec.image_height + cam_rng.uniform(-2.0, 2.0);
    k.width = spec.image_width;
    k.height = spec.image_height;
    gt.intrinsics.push_back(k);
  }

  Rng walk_rng(derive_seed(spec.seed, 1));
  const double hx = 0.5 * spec.extent_x;
  const double hy = 0.5 * spec.extent_y;
  gt.heights.assign(spec.n_people, spec.body_height);
  gt.ground_positions.assign(spec.n_people, {});
  gt.mass_heights.assign(spec.n_people, {});
  for (int p = 0; p < spec.n_people; ++p) {
    gt.heights[p] =
        spec.body_height * std::clamp(1.0 + walk_rng.gaussian(spec.height_jitter), 0.85, 1.15);
    const double mass_base = spec.body_mass_fraction * gt.heights[p];
    auto& track = gt.ground_positions[p];
    auto& mass = gt.mass_heights[p];
    track.reserve(spec.n_frames);
    mass.reserve(spec.n_frames);
    Eigen::Vector2d pos(walk_rng.uniform(-0.8 * hx, 0.8 * hx),
                        walk_rng.uniform(-0.8 * hy, 0.8 * hy));
    double heading = walk_rng.uniform(0.0, 2.0 * M_PI);
    track.push_back(pos);
    mass.push_back(mass_base + walk_rng.gaussian(spec.mass_bounce_sigma));
    for (int f = 1; f < spec.n_frames; ++f) {
      heading += walk_rng.gaussian(0.15);
      const double speed = spec.walk_speed * std::max(0.0, 1.0 + 0.25 * walk_rng.gaussian());
      const double step = speed / spec.fps;
      double nx = pos.x() + step * std::cos(heading);
      double ny = pos.y() + step * std::sin(heading);
      if (nx < -hx || nx > hx) {
        heading = M_PI - heading;
        nx = std::clamp(nx, -hx, hx);
      }
      if (ny < -hy || ny > hy) {
        heading = -heading;
        ny = std::clamp(ny, -hy, hy);
      }
      pos = {nx, ny};
      track.push_back(pos);
      mass.push_back(mass_base + walk_rng.gaussian(spec.mass_bounce_sigma));
    }
  }
  return gt;
}

struct RenderedScene {
  // [camera] -> tracklets sorted by person id; embeddings attached
  std::vector<std::vector<Tracklet>> tracklets;
  // (cam i, cam j), i < j -> exact pixel pairs of held-out 3D points
  std::map<std::pair<int, int>, std::vector<PointPair>> annotated;
  std::vector<ScalePriorObs> priors;
  // camera -> person id pairs whose identities were exchanged there
  std::map<int, std::vector<std::pair<int, int>>> swapped;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool project_visible(const GroundTruth& gt, int cam, const Eigen::Vector3d& x_world,
                            Eigen::Vector2d& px) {
  const Eigen::Vector3d x_cam = gt.world_to_cam[cam].apply(x_world);
  if (x_cam.z() <= 0.1) return false;
  px = project(x_world, gt.world_to_cam[cam], gt.intrinsics[cam]);
  return px.x() >= 0.0 && px.x() < gt.intrinsics[cam].width && px.y() >= 0.0 &&
         px.y() < gt.intrinsics[cam].height;
}

}  // namespace detail

// Renders detections camera by camera with per-camera derived seeds.
// Box centers follow the projected body mass point plus a uniform disc
// offset and Gaussian pixel noise; per-detection embeddings are the
// person's identity vector plus Gaussian noise (optionally exchanged
// between people to plant wrong associations, see swap_fraction). Also
// emits exact annotated pixel pairs per camera pair for held-out
// evaluation, and a few foot-to-head scale priors per non-reference
// camera.
inline RenderedScene render_observations(const GroundTruth& gt) {
  const SceneSpec& spec = gt.spec;
  RenderedScene out;
  const int n_cams = static_cast<int>(gt.world_to_cam.size());

  Rng id_rng(derive_seed(spec.seed, 3));
  std::vector<Eigen::VectorXd> identity(spec.n_people);
  for (int p = 0; p < spec.n_people; ++p) {
    Eigen::VectorXd v(spec.embedding_dim);
    for (int d = 0; d < spec.embedding_dim; ++d) v(d) = id_rng.gaussian();
    identity[p] = v.normalized();
  }

  out.tracklets.assign(n_cams, {});
  for (int c = 0; c < n_cams; ++c) {
    Rng rng(derive_seed(spec.seed, 1000 + static_cast<std::uint64_t>(c)));

    // Identity vector actually attached to each person in this camera.
    // Swapped people carry each other's vectors, so the association
    // stage will confidently match them to the wrong person.
    std::vector<int> ident(spec.n_people);
    for (int p = 0; p < spec.n_people; ++p) ident[p] = p;
    if (c > 0 && spec.swap_fraction > 0.0) {
      int n_swap = static_cast<int>(std::lround(spec.swap_fraction * spec.n_people)) & ~1;
      n_swap = std::min(n_swap, spec.n_people & ~1);
      Rng swap_rng(derive_seed(spec.seed, 4000 + static_cast<std::uint64_t>(c)));
      std::vector<int> order = ident;
      for (int k = 0; k < n_swap; ++k) {
        const std::size_t j =
            static_cast<std::size_t>(k) + swap_rng.index(order.size() - static_cast<std::size_t>(k));
        std::swap(order[static_cast<std::size_t>(k)], order[j]);
      }
      for (int k = 0; k + 1 < n_swap; k += 2) {
        std::swap(ident[order[k]], ident[order[k + 1]]);
        out.swapped[c].emplace_back(order[k], order[k + 1]);
      }
    }

    std::map<int, Tracklet> per_person;
    for (int f = 0; f < spec.n_frames; ++f) {
      for (int p = 0; p < spec.n_people; ++p) {
        const Eigen::Vector2d& g = gt.ground_positions[p][f];
        Eigen::Vector2d center, foot_px, head_px;
        if (!detail::project_visible(gt, c, gt.body_mass_world(p, f), center)) continue;
        const Eigen::Vector3d foot(g.x(), g.y(), 0.0);
        const Eigen::Vector3d head(g.x(), g.y(), gt.heights[p]);
        if (gt.world_to_cam[c].apply(foot).z() <= 0.1 ||
            gt.world_to_cam[c].apply(head).z() <= 0.1)
          continue;
        const double v_foot = project(foot, gt.world_to_cam[c], gt.intrinsics[c]).y();
        const double v_head = project(head, gt.world_to_cam[c], gt.intrinsics[c]).y();
        const double box_h = std::max(4.0, std::abs(v_foot - v_head));
        const double box_w = box_h * (0.36 + rng.uniform(-0.05, 0.05));

        center += rng.in_disc(spec.center_offset_px);
        center.x() += rng.gaussian(spec.pixel_noise_sigma);
        center.y() += rng.gaussian(spec.pixel_noise_sigma);

        BBox box;
        box.u_tl = center.x() - 0.5 * box_w;
        box.v_tl = center.y() - 0.5 * box_h;
        box.u_br = center.x() + 0.5 * box_w;
        box.v_br = center.y() + 0.5 * box_h;
        box.frame = f;
        box.person_id = p;
        box.camera_id = c;

        Eigen::VectorXd emb = identity[ident[p]];
        for (int d = 0; d < spec.embedding_dim; ++d)
          emb(d) += rng.gaussian(spec.embedding_noise_sigma);

        auto [it, inserted] = per_person.try_emplace(p);
        if (inserted) {
          it->second.camera_id = c;
          it->second.person_id = p;
        }
        it->second.boxes.push_back(box);
        it->second.embeddings.push_back(std::move(emb));
      }
    }
    for (auto& [p, tracklet] : per_person) out.tracklets[c].push_back(std::move(tracklet));
  }

  for (int p = 0; p < spec.n_people; ++p) {
    bool seen = false;
    for (int c = 0; c < n_cams && !seen; ++c)
      for (const auto& t : out.tracklets[c])
        if (t.person_id == p && !t.boxes.empty()) {
          seen = true;
          break;
        }
    if (!seen)
      out.warnings.push_back("person " + std::to_string(p) + " is never visible in any camera");
  }

  // Held-out annotated pairs: exact projections of random in-scene
  // points visible in both cameras of the pair.
  const int n_annotated = 15;
  for (int i = 0; i < n_cams; ++i) {
    for (int j = i + 1; j < n_cams; ++j) {
      Rng rng(derive_seed(spec.seed, 2000 + static_cast<std::uint64_t>(i * n_cams + j)));
      std::vector<PointPair>& pairs = out.annotated[{i, j}];
      for (int attempt = 0; attempt < 2000 && static_cast<int>(pairs.size()) < n_annotated;
           ++attempt) {
        const Eigen::Vector3d x(rng.uniform(-0.5 * spec.extent_x, 0.5 * spec.extent_x),
                                rng.uniform(-0.5 * spec.extent_y, 0.5 * spec.extent_y),
                                rng.uniform(0.2, 2.0));
        Eigen::Vector2d px_i, px_j;
        if (!detail::project_visible(gt, i, x, px_i) || !detail::project_visible(gt, j, x, px_j))
          continue;
        PointPair pp;
        pp.a = px_i;
        pp.b = px_j;
        pp.frame = -1;
        pp.person_id = -1;
        pairs.push_back(pp);
      }
      if (static_cast<int>(pairs.size()) < n_annotated)
        out.warnings.push_back("only " + std::to_string(pairs.size()) +
                               " annotated pairs for cameras " + std::to_string(i) + "," +
                               std::to_string(j));
    }
  }

  // Exact foot-to-head priors per non-reference camera: a handful of
  // (frame, person) observations visible in both camera 0 and camera i,
  // spread across the sequence so a bad single annotation cannot sink
  // the scale step.
  constexpr int kPriorsPerPair = 5;
  for (int i = 1; i < n_cams; ++i) {
    int found = 0;
    const int frame_step = std::max(1, spec.n_frames / 11);
    for (int f = 0; f < spec.n_frames && found < kPriorsPerPair; f += frame_step) {
      // At most one prior per sampled frame keeps them temporally spread.
      for (int p = 0; p < spec.n_people; ++p) {
        const Eigen::Vector2d& g = gt.ground_positions[p][f];
        const Eigen::Vector3d foot(g.x(), g.y(), 0.0);
        const Eigen::Vector3d head(g.x(), g.y(), gt.heights[p]);
        Eigen::Vector2d foot_0, head_0, foot_i, head_i;
        if (!detail::project_visible(gt, 0, foot, foot_0) ||
            !detail::project_visible(gt, 0, head, head_0) ||
            !detail::project_visible(gt, i, foot, foot_i) ||
            !detail::project_visible(gt, i, head, head_i))
          continue;
        ScalePriorObs prior;
        prior.length = gt.heights[p];
        prior.pixels[0] = {foot_0, head_0};
        prior.pixels[i] = {foot_i, head_i};
        out.priors.push_back(std::move(prior));
        ++found;
        break;
      }
    }
    if (found == 0)
      out.warnings.push_back("no scale prior found for camera pair 0," + std::to_string(i));
  }

  return out;
}

}  // namespace crowdcalib

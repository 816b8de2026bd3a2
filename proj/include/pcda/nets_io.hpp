#pragma once

#include <bit>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pcda/nets.hpp"

namespace pcda {

static_assert(std::endian::native == std::endian::little,
              "checkpoint arrays are little-endian float32");

using json = nlohmann::ordered_json;

inline void to_json(json& j, const NetConfig& c) {
  j = json{{"cloud_size", c.cloud_size},
           {"latent_dim", c.latent_dim},
           {"d_z", c.d_z},
           {"num_classes", c.num_classes},
           {"enc_embed1", c.enc_embed1},
           {"enc_width", c.enc_width},
           {"enc_fuse", c.enc_fuse},
           {"enc_head", c.enc_head},
           {"enc_attn_blocks", c.enc_attn_blocks},
           {"dec_h1", c.dec_h1},
           {"dec_h2", c.dec_h2},
           {"gen_hidden", c.gen_hidden},
           {"disc_h1", c.disc_h1},
           {"disc_h2", c.disc_h2},
           {"me_c1", c.me_c1},
           {"me_c2", c.me_c2},
           {"me_c3", c.me_c3},
           {"me_head", c.me_head},
           {"vdec_h1", c.vdec_h1},
           {"vdec_h2", c.vdec_h2},
           {"cls_c1", c.cls_c1},
           {"cls_c2", c.cls_c2},
           {"cls_c3", c.cls_c3},
           {"cls_h1", c.cls_h1},
           {"cls_h2", c.cls_h2},
           {"norm_eps", c.norm_eps}};
}

inline void from_json(const json& j, NetConfig& c) {
  NetConfig defaults;
  c = defaults;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("cloud_size", c.cloud_size);
  get("latent_dim", c.latent_dim);
  get("d_z", c.d_z);
  get("num_classes", c.num_classes);
  get("enc_embed1", c.enc_embed1);
  get("enc_width", c.enc_width);
  get("enc_fuse", c.enc_fuse);
  get("enc_head", c.enc_head);
  get("enc_attn_blocks", c.enc_attn_blocks);
  get("dec_h1", c.dec_h1);
  get("dec_h2", c.dec_h2);
  get("gen_hidden", c.gen_hidden);
  get("disc_h1", c.disc_h1);
  get("disc_h2", c.disc_h2);
  get("me_c1", c.me_c1);
  get("me_c2", c.me_c2);
  get("me_c3", c.me_c3);
  get("me_head", c.me_head);
  get("vdec_h1", c.vdec_h1);
  get("vdec_h2", c.vdec_h2);
  get("cls_c1", c.cls_c1);
  get("cls_c2", c.cls_c2);
  get("cls_c3", c.cls_c3);
  get("cls_h1", c.cls_h1);
  get("cls_h2", c.cls_h2);
  get("norm_eps", c.norm_eps);
}

namespace detail {

template <typename S>
void write_f32_rowmajor(const std::filesystem::path& path, const ad::Mat<S>& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + path.string());
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  std::size_t at = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) buf[at++] = static_cast<float>(m(r, c));
  }
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

template <typename S>
void read_f32_rowmajor(const std::filesystem::path& path, ad::Mat<S>& m) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot read " + path.string());
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float))) {
    throw ValidationError("checkpoint array " + path.string() + " is truncated");
  }
  std::size_t at = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<S>(buf[at++]);
  }
}

}  // namespace detail

/// Writes a checkpoint directory: meta.json (stage, epoch, seed, config
/// digest, block layout), shapes.json (per-array dims), and one little-endian
/// float32 row-major .bin per parameter.
template <typename S>
void save_checkpoint(const Bundle<S>& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json shapes = json::object();
  json blocks = json::object();
  for (const auto& name : block_names()) {
    const ParamBlock<S>& block = bundle.block(name);
    json plist = json::array();
    for (const auto& [k, v] : block.params) {
      const std::string full = name + "." + k;
      plist.push_back(k);
      shapes[full] = {v.rows(), v.cols()};
      detail::write_f32_rowmajor(dir / (full + ".bin"), v);
    }
    blocks[name] = plist;
  }
  json frozen = json::object();
  for (const auto& name : block_names()) frozen[name] = bundle.is_frozen(name);

  json meta;
  meta["format"] = "pcda-checkpoint-v1";
  meta["stage"] = bundle.meta.stage;
  meta["epoch"] = bundle.meta.epoch;
  meta["seed"] = bundle.meta.seed;
  meta["config_digest"] = bundle.meta.config_digest;
  meta["history"] = bundle.meta.history;
  meta["net_config"] = bundle.cfg;
  meta["frozen"] = frozen;
  meta["blocks"] = blocks;

  std::ofstream mf(dir / "meta.json");
  mf << meta.dump(2) << "\n";
  std::ofstream sf(dir / "shapes.json");
  sf << shapes.dump(2) << "\n";
}

template <typename S>
Bundle<S> load_checkpoint(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  std::ifstream mf(meta_path);
  if (!mf) throw ValidationError("missing checkpoint metadata: " + meta_path.string());
  json meta = json::parse(mf);
  if (meta.value("format", "") != std::string("pcda-checkpoint-v1")) {
    throw ValidationError("unrecognized checkpoint format in " + meta_path.string());
  }
  NetConfig cfg = meta.at("net_config").template get<NetConfig>();
  Bundle<S> bundle = init_bundle<S>(cfg, meta.value("seed", u64{0}));
  bundle.meta.stage = meta.value("stage", "init");
  bundle.meta.epoch = meta.value("epoch", 0);
  bundle.meta.seed = meta.value("seed", u64{0});
  bundle.meta.config_digest = meta.value("config_digest", "");
  if (meta.contains("history")) {
    bundle.meta.history = meta.at("history").template get<std::vector<std::string>>();
  }
  if (meta.contains("frozen")) {
    for (const auto& [k, v] : meta.at("frozen").items()) {
      bundle.frozen[k] = v.template get<bool>();
    }
  }

  std::ifstream sf(dir / "shapes.json");
  if (!sf) throw ValidationError("missing checkpoint shapes: " + (dir / "shapes.json").string());
  json shapes = json::parse(sf);

  for (const auto& name : block_names()) {
    ParamBlock<S>& block = bundle.block(name);
    for (auto& [k, v] : block.params) {
      const std::string full = name + "." + k;
      if (!shapes.contains(full)) {
        throw ValidationError("checkpoint missing shape entry for " + full);
      }
      const auto dims = shapes.at(full);
      if (dims.size() != 2 || dims[0].template get<Eigen::Index>() != v.rows() ||
          dims[1].template get<Eigen::Index>() != v.cols()) {
        throw ValidationError("checkpoint shape mismatch for " + full);
      }
      detail::read_f32_rowmajor(dir / (full + ".bin"), v);
    }
  }
  if (!bundle_finite(bundle)) {
    throw ValidationError("checkpoint " + dir.string() + " contains non-finite parameters");
  }
  return bundle;
}

}  // namespace pcda

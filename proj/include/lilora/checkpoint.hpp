#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lilora/adapters.hpp"
#include "lilora/backbone.hpp"
#include "lilora/errors.hpp"
#include "lilora/io.hpp"

// Backbone and adapter-bank checkpoints on top of the LLTC tensor container.
//
// Adapter bank entry names:
//   meta.strategy=<tag>, meta.init_scale, meta.num_tasks     (1x1)
//   L<i>.layer (backbone layer index), L<i>.dims (1x4: d k r r~)
//   seq-lora   L<i>.B  L<i>.A  L<i>.active
//   dir-lora   L<i>.task<t>.{B,A,frozen}
//   shared-a   L<i>.A  L<i>.task<t>.{B,frozen}
//   lilora     L<i>.A  L<i>.B0  [L<i>.B0_prev  L<i>.residual_prev]
//              L<i>.task<t>.{B_tilde,A_tilde,z,frozen[,fixed_alpha]}

namespace lilora {

inline void save_backbone(const std::filesystem::path& path, const Backbone& bb) {
  io::save_tensors(path, bb.to_tensors());
}

inline Backbone load_backbone(const std::filesystem::path& path) { return Backbone::from_tensors(io::load_tensors(path)); }

/// CRC32 of the serialized backbone; constant while the backbone is frozen.
inline std::uint32_t backbone_fingerprint(const Backbone& bb) {
  const auto bytes = io::encode_tensors(bb.to_tensors());
  return io::crc32(bytes.data(), bytes.size());
}

namespace detail {

inline Matrix flag(bool v) { return Matrix::scalar(v ? 1.0 : 0.0); }

inline std::size_t as_index(const Matrix& m, const std::string& name) {
  const double v = m.item();
  if (!(v >= 0.0) || v != static_cast<double>(static_cast<std::size_t>(v)))
    throw IntegrityError("tensor '" + name + "' is not a non-negative integer", 0);
  return static_cast<std::size_t>(v);
}

}  // namespace detail

inline io::NamedTensors bank_to_tensors(const AdapterBank& bank) {
  io::NamedTensors t;
  t.emplace_back("meta.strategy=" + bank.strategy().tag(), Matrix::scalar(1.0));
  t.emplace_back("meta.init_scale", Matrix::scalar(bank.init_scale() == InitScale::Unit ? 1.0 : 0.0));
  t.emplace_back("meta.num_tasks", Matrix::scalar(static_cast<double>(bank.num_tasks())));
  for (std::size_t i = 0; i < bank.num_layers(); ++i) {
    const std::string p = "L" + std::to_string(i) + ".";
    const LayerDims d = bank.dims(i);
    t.emplace_back(p + "layer", Matrix::scalar(static_cast<double>(bank.injected_layers()[i])));
    t.emplace_back(p + "dims", Matrix(1, 4, {double(d.d), double(d.k), double(d.r), double(d.r_tilde)}));
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, SeqLoRALayerState>) {
            t.emplace_back(p + "B", s.pair.B);
            t.emplace_back(p + "A", s.pair.A);
            t.emplace_back(p + "active", detail::flag(s.active));
          } else if constexpr (std::is_same_v<T, DirLoRALayerState>) {
            for (std::size_t k = 0; k < s.tasks.size(); ++k) {
              const std::string q = p + "task" + std::to_string(k) + ".";
              t.emplace_back(q + "B", s.tasks[k].B);
              t.emplace_back(q + "A", s.tasks[k].A);
              t.emplace_back(q + "frozen", detail::flag(s.tasks[k].frozen));
            }
          } else if constexpr (std::is_same_v<T, SharedALayerState>) {
            t.emplace_back(p + "A", s.A);
            for (std::size_t k = 0; k < s.tasks.size(); ++k) {
              const std::string q = p + "task" + std::to_string(k) + ".";
              t.emplace_back(q + "B", s.tasks[k].B);
              t.emplace_back(q + "frozen", detail::flag(s.tasks[k].frozen));
            }
          } else {
            t.emplace_back(p + "A", s.A);
            t.emplace_back(p + "B0", s.B0);
            if (s.B0_prev) t.emplace_back(p + "B0_prev", *s.B0_prev);
            if (s.residual_prev) t.emplace_back(p + "residual_prev", *s.residual_prev);
            for (std::size_t k = 0; k < s.tasks.size(); ++k) {
              const std::string q = p + "task" + std::to_string(k) + ".";
              const LiLoRATaskEntry& e = s.tasks[k];
              t.emplace_back(q + "B_tilde", e.B_tilde);
              t.emplace_back(q + "A_tilde", e.A_tilde);
              t.emplace_back(q + "z", e.z);
              t.emplace_back(q + "frozen", detail::flag(e.frozen));
              if (e.fixed_alpha) t.emplace_back(q + "fixed_alpha", Matrix::scalar(*e.fixed_alpha));
            }
          }
        },
        bank.layer(i));
  }
  return t;
}

inline AdapterBank bank_from_tensors(const io::NamedTensors& t) {
  std::optional<Strategy> strategy;
  for (const auto& [name, m] : t)
    if (name.rfind("meta.strategy=", 0) == 0) strategy = Strategy::parse(name.substr(14));
  if (!strategy) throw IntegrityError("adapter checkpoint has no strategy tag", 0);
  auto get = [&](const std::string& name) -> const Matrix& {
    const Matrix* m = io::try_find_tensor(t, name);
    if (!m) throw IntegrityError("adapter checkpoint is missing '" + name + "'", 0);
    return *m;
  };
  const InitScale scale = get("meta.init_scale").item() == 1.0 ? InitScale::Unit : InitScale::RankScaled;
  const std::size_t tasks = detail::as_index(get("meta.num_tasks"), "meta.num_tasks");

  std::vector<std::size_t> injected;
  std::vector<LayerState> layers;
  for (std::size_t i = 0; io::try_find_tensor(t, "L" + std::to_string(i) + ".dims"); ++i) {
    const std::string p = "L" + std::to_string(i) + ".";
    const Matrix& dm = get(p + "dims");
    if (dm.rows() != 1 || dm.cols() != 4) throw IntegrityError("bad dims tensor for " + p, 0);
    const LayerDims d{static_cast<std::size_t>(dm[0]), static_cast<std::size_t>(dm[1]), static_cast<std::size_t>(dm[2]),
                      static_cast<std::size_t>(dm[3])};
    injected.push_back(detail::as_index(get(p + "layer"), p + "layer"));
    auto task = [&](std::size_t k, const char* field) -> const Matrix& {
      return get(p + "task" + std::to_string(k) + "." + field);
    };
    switch (strategy->kind) {
      case StrategyKind::SeqLoRA: {
        SeqLoRALayerState s;
        s.dims = d;
        s.pair.B = get(p + "B");
        s.pair.A = get(p + "A");
        s.active = get(p + "active").item() == 1.0;
        s.tasks_seen = tasks;
        layers.emplace_back(std::move(s));
        break;
      }
      case StrategyKind::DirLoRA: {
        DirLoRALayerState s;
        s.dims = d;
        for (std::size_t k = 0; k < tasks; ++k) s.tasks.push_back({task(k, "B"), task(k, "A"), task(k, "frozen").item() == 1.0});
        layers.emplace_back(std::move(s));
        break;
      }
      case StrategyKind::SharedA: {
        SharedALayerState s;
        s.dims = d;
        s.A = get(p + "A");
        for (std::size_t k = 0; k < tasks; ++k) s.tasks.push_back({task(k, "B"), task(k, "frozen").item() == 1.0});
        layers.emplace_back(std::move(s));
        break;
      }
      default: {
        LiLoRALayerState s;
        s.dims = d;
        s.A = get(p + "A");
        s.B0 = get(p + "B0");
        if (const Matrix* m = io::try_find_tensor(t, p + "B0_prev")) s.B0_prev = *m;
        if (const Matrix* m = io::try_find_tensor(t, p + "residual_prev")) s.residual_prev = *m;
        for (std::size_t k = 0; k < tasks; ++k) {
          LiLoRATaskEntry e;
          e.B_tilde = task(k, "B_tilde");
          e.A_tilde = task(k, "A_tilde");
          e.z = task(k, "z");
          e.frozen = task(k, "frozen").item() == 1.0;
          if (const Matrix* m = io::try_find_tensor(t, p + "task" + std::to_string(k) + ".fixed_alpha"))
            e.fixed_alpha = m->item();
          s.tasks.push_back(std::move(e));
        }
        layers.emplace_back(std::move(s));
        break;
      }
    }
  }
  if (layers.empty()) throw IntegrityError("adapter checkpoint has no layers", 0);
  return AdapterBank::from_parts(*strategy, std::move(injected), std::move(layers), scale);
}

inline void save_bank(const std::filesystem::path& path, const AdapterBank& bank) {
  io::save_tensors(path, bank_to_tensors(bank));
}

inline AdapterBank load_bank(const std::filesystem::path& path) { return bank_from_tensors(io::load_tensors(path)); }

/// Serialized bytes of one task's entries across all layers (for freeze checks).
inline std::vector<std::uint8_t> task_entry_bytes(const AdapterBank& bank, std::size_t task_id) {
  const std::string marker = ".task" + std::to_string(task_id) + ".";
  io::NamedTensors sel;
  for (auto& [name, m] : bank_to_tensors(bank))
    if (name.find(marker) != std::string::npos) sel.emplace_back(name, m);
  return io::encode_tensors(sel);
}

}  // namespace lilora

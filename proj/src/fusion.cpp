#include "ummx/fusion.hpp"

#include <json.hpp>

#include "ummx/error.hpp"

namespace ummx {

FusionMode parse_fusion_mode(const std::string& mode) {
  if (mode == "cross") return FusionMode::cross;
  if (mode == "ablation") return FusionMode::ablation;
  throw ConfigError("fusion: unknown mode " + mode);
}

CrossAttendResult cross_modal_attend(Tape& tape, Var query_cls, Var other_tokens,
                                     const Tensor& other_mask, const CrossProjVars* proj) {
  const Tensor& tq = tape.value(query_cls);
  if (tq.rank() != 2) throw ShapeError("cross_modal_attend: query must be [B,H]");
  const int hq = tq.dim(1);
  const int hk = tape.value(other_tokens).dim(2);
  Var k = other_tokens, v = other_tokens;
  if (proj) {
    k = tape.linear(other_tokens, proj->wk, Var{});
    v = tape.linear(other_tokens, proj->wv, Var{});
  } else if (hk != hq) {
    throw ShapeError("cross_modal_attend: widths differ and no projection given");
  }
  CrossAttendResult r;
  r.context = tape.cross_attention(query_cls, k, v, other_mask, &r.weights);
  r.out = tape.add(r.context, query_cls);
  return r;
}

AugmentedReps fuse_visit(Tape& tape, const EncodedVisit& text, const Tensor& text_mask,
                         const EncodedVisit& diag, const Tensor& diag_mask,
                         const EncodedVisit* med, const Tensor* med_mask,
                         const FusionVars& vars, FusionMode mode) {
  AugmentedReps reps;
  reps.has_med = med != nullptr;
  if (med && !med_mask) throw ShapeError("fuse_visit: medication stream needs its mask");

  if (mode == FusionMode::ablation) {
    reps.diag.a_text = text.cls;
    reps.diag.a_code = diag.cls;
    if (med) {
      reps.med.a_text = text.cls;
      reps.med.a_code = med->cls;
    }
    return reps;
  }

  auto fuse_stream = [&](const EncodedVisit& code, const Tensor& code_mask) {
    StreamFusion s;
    const CrossAttendResult t_over_c =
        cross_modal_attend(tape, text.cls, code.z, code_mask, &vars.text_query);
    const CrossAttendResult c_over_t =
        cross_modal_attend(tape, code.cls, text.z, text_mask, &vars.code_query);
    s.a_text = t_over_c.out;
    s.a_code = c_over_t.out;
    s.text_weights = t_over_c.weights;
    s.code_weights = c_over_t.weights;
    return s;
  };
  reps.diag = fuse_stream(diag, diag_mask);
  if (med) reps.med = fuse_stream(*med, *med_mask);
  return reps;
}

std::string attention_export_json(const std::string& visit_id, const std::string& direction,
                                  const std::vector<std::string>& source_tokens,
                                  const std::vector<double>& weights) {
  if (direction != "text_over_code" && direction != "code_over_text")
    throw ConfigError("attention export: unknown direction " + direction);
  if (source_tokens.size() != weights.size())
    throw ShapeError("attention export: one weight per source token required");
  nlohmann::json j;
  j["visit_id"] = visit_id;
  j["direction"] = direction;
  j["source_tokens"] = source_tokens;
  j["weights"] = weights;
  return j.dump();
}

}  // namespace ummx

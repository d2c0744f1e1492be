#include "geocap/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "geocap/error.hpp"

namespace geocap {

using nn::Graph;
using nn::Parameter;
using nn::Tensor;
using nn::Var;
using json = nlohmann::json;

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoPInd: return "no_p_ind";
    case Variant::NoGInd: return "no_g_ind";
    case Variant::NoKnowledge: return "no_knowledge";
    case Variant::GeoOnly: return "geo_only";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::Full, Variant::NoPInd, Variant::NoGInd, Variant::NoKnowledge, Variant::GeoOnly})
    if (variant_name(v) == name) return v;
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

ModelConfig ModelConfig::large() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d = 64;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.heads = 2;
  c.ff_dim = 128;
  c.dropout = 0.0;
  c.lr = 2e-3;
  c.max_epochs = 500;
  c.features = FeatureShape{8, 32};
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (d <= 0 || enc_layers < 0 || dec_layers <= 0 || heads <= 0 || ff_dim <= 0) fail("sizes must be positive");
  if (d % heads != 0) fail("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
  if (d <= kGeoScalarFeatures) fail("d must exceed the " + std::to_string(kGeoScalarFeatures) + " geographic scalars");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (grad_clip < 0.0) fail("grad_clip must be non-negative");
  if (early_stop_patience <= 0 || max_epochs <= 0) fail("epoch limits must be positive");
  if (target_loss < 0.0) fail("target_loss must be non-negative");
  if (n == 0 || m == 0 || !(r > 0.0) || max_caption_len == 0) fail("context sizes must be positive");
  if (features.positions <= 0 || features.channels <= 0) fail("feature shape must be positive");
}

std::string ModelConfig::canonical() const {
  std::ostringstream out;
  out.precision(17);
  out << "d=" << d << ";enc_layers=" << enc_layers << ";dec_layers=" << dec_layers << ";heads=" << heads
      << ";ff_dim=" << ff_dim << ";dropout=" << dropout << ";lr=" << lr << ";grad_clip=" << grad_clip
      << ";early_stop_patience=" << early_stop_patience << ";max_epochs=" << max_epochs
      << ";target_loss=" << target_loss << ";n=" << n << ";r=" << r << ";m=" << m
      << ";max_caption_len=" << max_caption_len << ";positions=" << features.positions
      << ";channels=" << features.channels << ";variant=" << variant_name(variant) << ";seed=" << seed;
  return out.str();
}

std::string config_to_json(const ModelConfig& c) {
  json j = {{"d", c.d},
            {"enc_layers", c.enc_layers},
            {"dec_layers", c.dec_layers},
            {"heads", c.heads},
            {"ff_dim", c.ff_dim},
            {"dropout", c.dropout},
            {"lr", c.lr},
            {"grad_clip", c.grad_clip},
            {"early_stop_patience", c.early_stop_patience},
            {"max_epochs", c.max_epochs},
            {"target_loss", c.target_loss},
            {"n", c.n},
            {"r", c.r},
            {"m", c.m},
            {"max_caption_len", c.max_caption_len},
            {"positions", c.features.positions},
            {"channels", c.features.channels},
            {"variant", std::string(variant_name(c.variant))},
            {"seed", c.seed}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelConfig c;
    c.d = j.at("d").get<int>();
    c.enc_layers = j.at("enc_layers").get<int>();
    c.dec_layers = j.at("dec_layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ff_dim = j.at("ff_dim").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.lr = j.at("lr").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.early_stop_patience = j.at("early_stop_patience").get<int>();
    c.max_epochs = j.at("max_epochs").get<int>();
    c.target_loss = j.at("target_loss").get<double>();
    c.n = j.at("n").get<std::size_t>();
    c.r = j.at("r").get<double>();
    c.m = j.at("m").get<std::size_t>();
    c.max_caption_len = j.at("max_caption_len").get<std::size_t>();
    c.features.positions = j.at("positions").get<int>();
    c.features.channels = j.at("channels").get<int>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

IndicatorState compute_indicators(const TokenizedCaption& prefix, std::span<const int> fact_subjects,
                                  std::span<const int> fact_predicates, int predicate_rows) {
  if (fact_subjects.size() != fact_predicates.size()) throw ConfigError("fact subject/predicate count mismatch");
  IndicatorState s;
  s.p_ind.assign(static_cast<std::size_t>(predicate_rows), 0);
  s.g_ind.assign(fact_subjects.size(), 0);
  for (std::size_t i = 0; i < prefix.size(); ++i)
    if (prefix.kinds[i] == TokenKind::Entity) s.mentioned_entities.insert(prefix.refs[i]);
  for (std::size_t j = 0; j < fact_subjects.size(); ++j) {
    if (s.mentioned_entities.count(fact_subjects[j]) == 0) continue;
    s.g_ind[j] = 1;
    const int q = fact_predicates[j];
    if (q < 0 || q >= predicate_rows) throw DataError("predicate row out of range");
    s.p_ind[static_cast<std::size_t>(q)] = 1;
  }
  return s;
}

IndicatorState compute_indicators(const TokenizedCaption& prefix, const KnowledgeContext& knowledge,
                                  const LabelEmbedding& predicates) {
  std::vector<int> subjects, preds;
  for (const auto& cf : knowledge.facts) {
    subjects.push_back(cf.subject_ref);
    preds.push_back(predicates.index_of(cf.fact.predicate));
  }
  return compute_indicators(prefix, subjects, preds, predicates.rows());
}

double HybridDistribution::total() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }

int HybridDistribution::argmax() const {
  if (probs.empty()) throw NumericError("argmax of an empty distribution");
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

TokenKind HybridDistribution::kind_of(int index) const {
  if (index < vocab_size) return TokenKind::Vocab;
  if (index < vocab_size + geo_size) return TokenKind::Entity;
  return TokenKind::Fact;
}

int HybridDistribution::ref_of(int index) const {
  if (index < vocab_size) return index;
  if (index < vocab_size + geo_size) return index - vocab_size;
  return index - vocab_size - geo_size;
}

HybridDistribution hybrid_distribution(std::span<const double> vocab_scores, std::span<const double> geo_scores,
                                       std::span<const double> knowledge_scores) {
  HybridDistribution out;
  out.vocab_size = static_cast<int>(vocab_scores.size());
  out.geo_size = static_cast<int>(geo_scores.size());
  out.knowledge_size = static_cast<int>(knowledge_scores.size());
  out.probs.reserve(vocab_scores.size() + geo_scores.size() + knowledge_scores.size());
  for (auto part : {vocab_scores, geo_scores, knowledge_scores}) out.probs.insert(out.probs.end(), part.begin(), part.end());
  if (out.probs.empty()) throw ConfigError("hybrid distribution over an empty score set");
  const double mx = *std::max_element(out.probs.begin(), out.probs.end());
  if (!std::isfinite(mx)) throw NumericError("non-finite score");
  double sum = 0.0;
  for (double& p : out.probs) {
    p = std::exp(p - mx);
    sum += p;
  }
  for (double& p : out.probs) p /= sum;
  return out;
}

template <typename T>
Tensor<T> sinusoidal_positions(int rows, int dim) {
  Tensor<T> pe(rows, dim);
  for (int pos = 0; pos < rows; ++pos)
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
    }
  return pe;
}

namespace {

template <typename T>
Tensor<T> indicator_rows(const std::vector<IndicatorState>& states, bool predicates, int width) {
  Tensor<T> out(static_cast<int>(states.size()), width);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& v = predicates ? states[i].p_ind : states[i].g_ind;
    for (int j = 0; j < width; ++j) out(static_cast<int>(i), j) = v[static_cast<std::size_t>(j)] ? T{1} : T{0};
  }
  return out;
}

struct HeadVars {
  Var w_pred, w_vocab, w_geo, w_f;
};

/// [y_v | y_e | y_f] for every row of `states`. `emb_g`/`emb_k` are ignored
/// when their counts are zero.
template <typename T>
Var head_logits(Graph<T>& g, Var states, Var emb_g, int n_g, Var emb_k, int n_k,
                const std::vector<IndicatorState>& ind, int predicate_rows, Variant variant, const HeadVars& w) {
  std::vector<Var> parts;
  if (uses_p_ind(variant)) {
    Var gate = g.matmul(g.constant(indicator_rows<T>(ind, true, predicate_rows)), w.w_pred);
    parts.push_back(g.matmul(g.mul(states, gate), w.w_vocab));
  } else {
    parts.push_back(g.matmul(states, w.w_vocab));
  }
  if (uses_geo(variant) && n_g > 0) parts.push_back(g.matmul(g.mul_row(states, w.w_geo), emb_g, false, true));
  if (uses_knowledge(variant) && n_k > 0) {
    Var scores = g.matmul(g.mul_row(states, w.w_f), emb_k, false, true);
    if (uses_g_ind(variant)) scores = g.mul(scores, g.constant(indicator_rows<T>(ind, false, n_k)));
    parts.push_back(scores);
  }
  return parts.size() == 1 ? parts[0] : g.concat_cols(parts);
}

template <typename T>
Tensor<T> xavier(int in, int out, Rng& rng) {
  Tensor<T> t(in, out);
  const double a = std::sqrt(6.0 / (in + out));
  for (auto& x : t.values()) x = static_cast<T>(uniform(rng, -a, a));
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(int rows, int cols, double lo, double hi, Rng& rng) {
  Tensor<T> t(rows, cols);
  for (auto& x : t.values()) x = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

template <typename T>
Linear<T> make_linear(const std::string& name, int in, int out, Rng& rng) {
  return Linear<T>{Parameter<T>(name + ".weight", xavier<T>(in, out, rng)),
                   Parameter<T>(name + ".bias", Tensor<T>(1, out))};
}

template <typename T>
LayerNorm<T> make_norm(const std::string& name, int d) {
  return LayerNorm<T>{Parameter<T>(name + ".gain", Tensor<T>(1, d, T{1})), Parameter<T>(name + ".bias", Tensor<T>(1, d))};
}

template <typename T>
MultiHeadAttention<T> make_attention(const std::string& name, int d, int heads, Rng& rng) {
  MultiHeadAttention<T> a;
  a.heads = heads;
  a.query = make_linear<T>(name + ".query", d, d, rng);
  a.key = make_linear<T>(name + ".key", d, d, rng);
  a.value = make_linear<T>(name + ".value", d, d, rng);
  a.out = make_linear<T>(name + ".out", d, d, rng);
  return a;
}

template <typename T>
EncoderLayer<T> make_encoder_layer(const std::string& name, const ModelConfig& c, Rng& rng) {
  EncoderLayer<T> l;
  l.attn = make_attention<T>(name + ".attn", c.d, c.heads, rng);
  l.ff1 = make_linear<T>(name + ".ff1", c.d, c.ff_dim, rng);
  l.ff2 = make_linear<T>(name + ".ff2", c.ff_dim, c.d, rng);
  l.norm1 = make_norm<T>(name + ".norm1", c.d);
  l.norm2 = make_norm<T>(name + ".norm2", c.d);
  return l;
}

template <typename T>
DecoderLayer<T> make_decoder_layer(const std::string& name, const ModelConfig& c, Rng& rng) {
  DecoderLayer<T> l;
  l.self_attn = make_attention<T>(name + ".self_attn", c.d, c.heads, rng);
  l.cross_attn = make_attention<T>(name + ".cross_attn", c.d, c.heads, rng);
  l.ff1 = make_linear<T>(name + ".ff1", c.d, c.ff_dim, rng);
  l.ff2 = make_linear<T>(name + ".ff2", c.ff_dim, c.d, rng);
  l.norm1 = make_norm<T>(name + ".norm1", c.d);
  l.norm2 = make_norm<T>(name + ".norm2", c.d);
  l.norm3 = make_norm<T>(name + ".norm3", c.d);
  return l;
}

template <typename T>
void collect(std::vector<NamedParameter<T>>& out, Linear<T>& l) {
  out.push_back({l.weight.name, &l.weight});
  out.push_back({l.bias.name, &l.bias});
}

template <typename T>
void collect(std::vector<NamedParameter<T>>& out, LayerNorm<T>& l) {
  out.push_back({l.gain.name, &l.gain});
  out.push_back({l.bias.name, &l.bias});
}

template <typename T>
void collect(std::vector<NamedParameter<T>>& out, MultiHeadAttention<T>& a) {
  for (Linear<T>* l : {&a.query, &a.key, &a.value, &a.out}) collect(out, *l);
}

template <typename T>
void collect(std::vector<NamedParameter<T>>& out, EncoderLayer<T>& l) {
  collect(out, l.attn);
  collect(out, l.ff1);
  collect(out, l.ff2);
  collect(out, l.norm1);
  collect(out, l.norm2);
}

template <typename T>
void collect(std::vector<NamedParameter<T>>& out, DecoderLayer<T>& l) {
  collect(out, l.self_attn);
  collect(out, l.cross_attn);
  collect(out, l.ff1);
  collect(out, l.ff2);
  collect(out, l.norm1);
  collect(out, l.norm2);
  collect(out, l.norm3);
}

}  // namespace

template <typename T>
HybridScores<T> hybrid_scores(const Tensor<T>& h, const Tensor<T>& emb_g, const Tensor<T>& emb_k,
                              const IndicatorState& indicators, Variant variant, const HeadWeights<T>& head) {
  const int d = h.cols();
  if (h.rows() != 1) throw ConfigError("hybrid_scores expects a single decoder state");
  if (head.w_vocab.rows() != d || head.w_geo.cols() != d || head.w_f.cols() != d || head.w_pred.cols() != d ||
      head.w_geo.rows() != 1 || head.w_f.rows() != 1)
    throw ConfigError("hybrid head weight shapes do not match the decoder width");
  if (uses_p_ind(variant) && static_cast<int>(indicators.p_ind.size()) != head.w_pred.rows())
    throw ConfigError("p_ind length does not match W_pred");
  const int n_g = emb_g.rows();
  const int n_k = emb_k.rows();
  if ((n_g > 0 && emb_g.cols() != d) || (n_k > 0 && emb_k.cols() != d))
    throw ConfigError("context embedding width does not match the decoder width");
  if (uses_knowledge(variant) && uses_g_ind(variant) && static_cast<int>(indicators.g_ind.size()) != n_k)
    throw ConfigError("g_ind length does not match the knowledge context");

  Graph<T> g;
  HeadVars w{g.constant(head.w_pred), g.constant(head.w_vocab), g.constant(head.w_geo), g.constant(head.w_f)};
  Var eg = n_g > 0 ? g.constant(emb_g) : Var{};
  Var ek = n_k > 0 ? g.constant(emb_k) : Var{};
  Var logits = head_logits(g, g.constant(h), eg, n_g, ek, n_k, std::vector<IndicatorState>{indicators},
                           head.w_pred.rows(), variant, w);
  const auto& lv = g.value(logits);
  HybridScores<T> out;
  const int v = head.w_vocab.cols();
  out.vocab.assign(lv.row(0), lv.row(0) + v);
  int c = v;
  if (uses_geo(variant) && n_g > 0) {
    out.geo.assign(lv.row(0) + c, lv.row(0) + c + n_g);
    c += n_g;
  }
  if (uses_knowledge(variant) && n_k > 0) out.knowledge.assign(lv.row(0) + c, lv.row(0) + c + n_k);
  return out;
}

template <typename T>
Var Linear<T>::operator()(Graph<T>& g, Var x) {
  return g.add_row(g.matmul(x, g.param(weight)), g.param(bias));
}

template <typename T>
Var LayerNorm<T>::operator()(Graph<T>& g, Var x) {
  return g.layer_norm(x, g.param(gain), g.param(bias));
}

template <typename T>
Var MultiHeadAttention<T>::operator()(Graph<T>& g, Var q, Var kv, bool causal, double dropout) {
  Var qs = query(g, q);
  Var ks = key(g, kv);
  Var vs = value(g, kv);
  const int d = g.cols(qs);
  const int dh = d / heads;
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Var> outs;
  for (int h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? qs : g.slice_cols(qs, h * dh, dh);
    Var kh = heads == 1 ? ks : g.slice_cols(ks, h * dh, dh);
    Var vh = heads == 1 ? vs : g.slice_cols(vs, h * dh, dh);
    Var att = g.softmax_rows(g.scale(g.matmul(qh, kh, false, true), inv), causal);
    outs.push_back(g.matmul(g.dropout(att, dropout), vh));
  }
  return out(g, outs.size() == 1 ? outs[0] : g.concat_cols(outs));
}

template <typename T>
Var EncoderLayer<T>::operator()(Graph<T>& g, Var x, double dropout) {
  x = norm1(g, g.add(x, g.dropout(attn(g, x, x, false, dropout), dropout)));
  Var ff = ff2(g, g.dropout(g.relu(ff1(g, x)), dropout));
  return norm2(g, g.add(x, g.dropout(ff, dropout)));
}

template <typename T>
Var DecoderLayer<T>::operator()(Graph<T>& g, Var x, Var memory, double dropout) {
  x = norm1(g, g.add(x, g.dropout(self_attn(g, x, x, true, dropout), dropout)));
  x = norm2(g, g.add(x, g.dropout(cross_attn(g, x, memory, false, dropout), dropout)));
  Var ff = ff2(g, g.dropout(g.relu(ff1(g, x)), dropout));
  return norm3(g, g.add(x, g.dropout(ff, dropout)));
}

template <typename T>
CaptionModel<T>::CaptionModel(ModelConfig config, Vocabulary vocab, std::vector<std::string> type_tags,
                              std::vector<std::string> predicates)
    : config_(std::move(config)),
      vocab_(std::move(vocab)),
      type_tags_(std::move(type_tags)),
      predicates_(std::move(predicates)) {
  config_.validate();
  if (vocab_.size() < Vocabulary::kReserved) throw ConfigError("vocabulary lacks the reserved tokens");
  if (vocab_.dim() != config_.d)
    throw ConfigError("vocabulary vectors have width " + std::to_string(vocab_.dim()) + ", model width is " +
                      std::to_string(config_.d));
  for (std::size_t i = 0; i < type_tags_.size(); ++i)
    if (!type_index_.emplace(type_tags_[i], static_cast<int>(i) + 1).second)
      throw ConfigError("duplicate type tag: " + type_tags_[i]);
  for (std::size_t i = 0; i < predicates_.size(); ++i)
    if (!predicate_index_.emplace(predicates_[i], static_cast<int>(i) + 1).second)
      throw ConfigError("duplicate predicate: " + predicates_[i]);

  const ModelConfig& c = config_;
  Rng rng(c.seed ^ 0x6d6f64656c696e69ULL);
  image_proj_ = make_linear<T>("image_proj", c.features.channels, c.d, rng);
  for (int i = 0; i < c.enc_layers; ++i)
    geo_encoder_.push_back(make_encoder_layer<T>("geo_encoder." + std::to_string(i), c, rng));
  for (int i = 0; i < c.enc_layers; ++i)
    knowledge_encoder_.push_back(make_encoder_layer<T>("knowledge_encoder." + std::to_string(i), c, rng));
  for (int i = 0; i < c.dec_layers; ++i)
    decoder_.push_back(make_decoder_layer<T>("decoder." + std::to_string(i), c, rng));
  type_table_ = Parameter<T>("type_table", uniform_tensor<T>(static_cast<int>(type_tags_.size()) + 1, c.type_dim(),
                                                             -0.1, 0.1, rng));
  predicate_table_ =
      Parameter<T>("predicate_table", uniform_tensor<T>(predicate_rows(), c.d, -0.1, 0.1, rng));
  vocab_table_ = Parameter<T>("vocab_table", vocab_.vectors().template cast<T>());
  w_pred_ = Parameter<T>("w_pred", uniform_tensor<T>(predicate_rows(), c.d, 0.9, 1.1, rng));
  w_vocab_ = Parameter<T>("w_vocab", xavier<T>(c.d, vocab_.size(), rng));
  const double a = std::sqrt(3.0 / c.d);
  w_geo_ = Parameter<T>("w_geo", uniform_tensor<T>(1, c.d, -a, a, rng));
  w_f_ = Parameter<T>("w_f", uniform_tensor<T>(1, c.d, -a, a, rng));
  positions_ = sinusoidal_positions<T>(static_cast<int>(c.max_caption_len) + 1, c.d);
}

template <typename T>
int CaptionModel<T>::type_row(const std::string& tag) const {
  auto it = type_index_.find(tag);
  return it == type_index_.end() ? 0 : it->second;
}

template <typename T>
int CaptionModel<T>::predicate_row(const std::string& predicate) const {
  auto it = predicate_index_.find(predicate);
  return it == predicate_index_.end() ? 0 : it->second;
}

template <typename T>
std::vector<NamedParameter<T>> CaptionModel<T>::parameters() {
  std::vector<NamedParameter<T>> out;
  collect(out, image_proj_);
  for (auto& l : geo_encoder_) collect(out, l);
  for (auto& l : knowledge_encoder_) collect(out, l);
  for (auto& l : decoder_) collect(out, l);
  for (Parameter<T>* p : {&type_table_, &predicate_table_, &vocab_table_, &w_pred_, &w_vocab_, &w_geo_, &w_f_})
    out.push_back({p->name, p});
  return out;
}

template <typename T>
std::size_t CaptionModel<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.param->value.size();
  return n;
}

template <typename T>
Parameter<T>& CaptionModel<T>::parameter(const std::string& name) {
  for (auto& p : parameters())
    if (p.name == name) return *p.param;
  throw ConfigError("no parameter named " + name);
}

template <typename T>
ExampleInput CaptionModel<T>::make_input(const GeoContext& geo, const KnowledgeContext& knowledge,
                                         Tensor<float> image) const {
  if (image.rows() != config_.features.positions || image.cols() != config_.features.channels)
    throw ConfigError("image features are " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                      ", model expects " + std::to_string(config_.features.positions) + "x" +
                      std::to_string(config_.features.channels));
  ExampleInput in;
  in.image = std::move(image);
  const bool geo_on = uses_geo(config_.variant);
  const bool kb_on = uses_knowledge(config_.variant);
  const int n_g = geo_on ? static_cast<int>(geo.size()) : 0;
  in.geo_scalars = Tensor<double>(n_g, kGeoScalarFeatures);
  for (int i = 0; i < n_g; ++i) {
    const auto f = geo_scalar_features(geo.entities[static_cast<std::size_t>(i)]);
    std::copy(f.begin(), f.end(), in.geo_scalars.row(i));
    in.geo_types.push_back(type_row(geo.entities[static_cast<std::size_t>(i)].entity.type_tag));
  }
  if (kb_on) {
    for (const auto& cf : knowledge.facts) {
      if (cf.subject_ref < 0 || cf.subject_ref >= n_g) throw DataError("fact subject outside the geographic context");
      in.fact_subjects.push_back(cf.subject_ref);
      in.fact_predicates.push_back(predicate_row(cf.fact.predicate));
    }
  }
  return in;
}

template <typename T>
Example CaptionModel<T>::make_example(const std::string& image_id, const std::vector<std::string>& caption_tokens,
                                      const GeoContext& geo, const KnowledgeContext& knowledge,
                                      Tensor<float> image) const {
  GeoContext geo_used;
  geo_used.image_location = geo.image_location;
  if (uses_geo(config_.variant)) geo_used.entities = geo.entities;
  KnowledgeContext kb_used;
  if (uses_knowledge(config_.variant)) kb_used = knowledge;

  Example ex;
  ex.image_id = image_id;
  ex.input = make_input(geo_used, kb_used, std::move(image));
  ex.caption = link_caption(caption_tokens, geo_used, kb_used);
  vocab_.resolve(ex.caption);
  if (ex.caption.size() > config_.max_caption_len)
    throw DataError(image_id + ": caption exceeds " + std::to_string(config_.max_caption_len) + " tokens");
  return ex;
}

template <typename T>
Var CaptionModel<T>::geo_embeddings(Graph<T>& g, const ExampleInput& in) {
  Var scalars = g.constant(in.geo_scalars.template cast<T>());
  Var types = g.gather_rows(g.param(type_table_), in.geo_types);
  const std::array<Var, 2> parts{scalars, types};
  return g.concat_cols(parts);
}

template <typename T>
Var CaptionModel<T>::fact_embeddings(Graph<T>& g, Var emb_g, const ExampleInput& in) {
  return g.add(g.gather_rows(emb_g, in.fact_subjects), g.gather_rows(g.param(predicate_table_), in.fact_predicates));
}

template <typename T>
typename CaptionModel<T>::Encoded CaptionModel<T>::encode(Graph<T>& g, const ExampleInput& in) {
  if (in.image.cols() != config_.features.channels) throw ConfigError("image feature width mismatch");
  Encoded enc;
  enc.n_img = in.image.rows();
  enc.n_g = in.geo_size();
  enc.n_k = in.knowledge_size();
  if (enc.n_k > 0 && enc.n_g == 0) throw DataError("knowledge context without geographic context");
  std::vector<Var> sections{image_proj_(g, g.constant(in.image.template cast<T>()))};
  const double p = config_.dropout;
  if (enc.n_g > 0) {
    enc.emb_g = geo_embeddings(g, in);
    Var x = enc.emb_g;
    for (auto& layer : geo_encoder_) x = layer(g, x, p);
    sections.push_back(x);
  }
  if (enc.n_k > 0) {
    enc.emb_k = fact_embeddings(g, enc.emb_g, in);
    Var x = enc.emb_k;
    for (auto& layer : knowledge_encoder_) x = layer(g, x, p);
    sections.push_back(x);
  }
  enc.memory = sections.size() == 1 ? sections[0] : g.concat_rows(sections);
  return enc;
}

template <typename T>
Var CaptionModel<T>::embed_prefix(Graph<T>& g, const Encoded& enc, const TokenizedCaption& prefix) {
  const std::size_t rows = prefix.size() + 1;
  if (rows > static_cast<std::size_t>(positions_.rows()))
    throw DataError("sequence of " + std::to_string(rows) + " positions exceeds the limit of " +
                    std::to_string(positions_.rows()));
  std::vector<Var> sources{g.param(vocab_table_)};
  const int g_src = enc.n_g > 0 ? static_cast<int>(sources.size()) : -1;
  if (enc.n_g > 0) sources.push_back(enc.emb_g);
  const int k_src = enc.n_k > 0 ? static_cast<int>(sources.size()) : -1;
  if (enc.n_k > 0) sources.push_back(enc.emb_k);

  std::vector<std::pair<int, int>> picks{{0, Vocabulary::kBos}};
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    const int ref = prefix.refs[i];
    switch (prefix.kinds[i]) {
      case TokenKind::Vocab:
        if (ref < 0 || ref >= vocab_.size()) throw DataError("vocabulary reference out of range");
        picks.emplace_back(0, ref);
        break;
      case TokenKind::Entity:
        if (g_src < 0 || ref < 0 || ref >= enc.n_g) throw DataError("entity reference out of range");
        picks.emplace_back(g_src, ref);
        break;
      case TokenKind::Fact:
        if (k_src < 0 || ref < 0 || ref >= enc.n_k) throw DataError("fact reference out of range");
        picks.emplace_back(k_src, ref);
        break;
    }
  }
  Tensor<T> pos(static_cast<int>(rows), config_.d);
  std::copy(positions_.row(0), positions_.row(0) + pos.size(), pos.row(0));
  return g.add(g.pick_rows(sources, std::move(picks)), g.constant(std::move(pos)));
}

template <typename T>
Var CaptionModel<T>::decode(Graph<T>& g, const Encoded& enc, const TokenizedCaption& prefix) {
  Var x = embed_prefix(g, enc, prefix);
  for (auto& layer : decoder_) x = layer(g, x, enc.memory, config_.dropout);
  return x;
}

template <typename T>
Var CaptionModel<T>::logits(Graph<T>& g, Var states, const Encoded& enc, const ExampleInput& in,
                            const TokenizedCaption& prefix) {
  const int rows = g.rows(states);
  const int first = static_cast<int>(prefix.size()) + 1 - rows;
  if (first < 0) throw ConfigError("more decoder states than prefix positions");
  std::vector<IndicatorState> ind;
  TokenizedCaption partial;
  for (int t = 0; t <= static_cast<int>(prefix.size()); ++t) {
    if (t >= first) ind.push_back(compute_indicators(partial, in.fact_subjects, in.fact_predicates, predicate_rows()));
    if (t < static_cast<int>(prefix.size()))
      partial.push(prefix.tokens[static_cast<std::size_t>(t)], prefix.kinds[static_cast<std::size_t>(t)],
                   prefix.refs[static_cast<std::size_t>(t)]);
  }
  HeadVars w{g.param(w_pred_), g.param(w_vocab_), g.param(w_geo_), g.param(w_f_)};
  return head_logits(g, states, enc.emb_g, enc.n_g, enc.emb_k, enc.n_k, ind, predicate_rows(), config_.variant, w);
}

template <typename T>
T CaptionModel<T>::loss(const Example& ex, bool training, Rng* rng, bool backward) {
  Graph<T> g(training, rng);
  Encoded enc = encode(g, ex.input);
  Var states = decode(g, enc, ex.caption);
  Var scores = logits(g, states, enc, ex.input, ex.caption);
  const int v = vocab_.size();
  std::vector<int> targets;
  targets.reserve(ex.caption.size() + 1);
  for (std::size_t i = 0; i < ex.caption.size(); ++i) {
    const int ref = ex.caption.refs[i];
    switch (ex.caption.kinds[i]) {
      case TokenKind::Vocab: targets.push_back(ref); break;
      case TokenKind::Entity: targets.push_back(v + ref); break;
      case TokenKind::Fact: targets.push_back(v + enc.n_g + ref); break;
    }
  }
  targets.push_back(Vocabulary::kEos);
  Var l = g.cross_entropy(scores, std::move(targets));
  if (backward) g.backward(l);
  return g.value(l)(0, 0);
}

template <typename T>
HybridDistribution CaptionModel<T>::next_distribution(const ExampleInput& in, const TokenizedCaption& prefix) {
  Graph<T> g;
  Encoded enc = encode(g, in);
  Var states = decode(g, enc, prefix);
  Var last = g.slice_rows(states, g.rows(states) - 1, 1);
  const auto& lv = g.value(logits(g, last, enc, in, prefix));
  const int v = vocab_.size();
  const int n_g = uses_geo(config_.variant) ? enc.n_g : 0;
  const int n_k = uses_knowledge(config_.variant) ? enc.n_k : 0;
  std::vector<double> row(lv.row(0), lv.row(0) + lv.cols());
  return hybrid_distribution(std::span<const double>(row).subspan(0, v),
                             std::span<const double>(row).subspan(v, n_g),
                             std::span<const double>(row).subspan(v + n_g, n_k));
}

template <typename T>
TokenizedCaption CaptionModel<T>::generate(const ExampleInput& in, const GeoContext& geo,
                                           const KnowledgeContext& knowledge) {
  Graph<T> g;
  Encoded enc = encode(g, in);
  if (enc.n_g > static_cast<int>(geo.size()) || enc.n_k > static_cast<int>(knowledge.size()))
    throw DataError("contexts do not match the encoded input");
  const int v = vocab_.size();
  TokenizedCaption out;
  while (out.size() < config_.max_caption_len) {
    Var states = decode(g, enc, out);
    Var last = g.slice_rows(states, g.rows(states) - 1, 1);
    const auto& lv = g.value(logits(g, last, enc, in, out));
    int best = -1;
    for (int j = 0; j < lv.cols(); ++j) {
      if (j == Vocabulary::kPad || j == Vocabulary::kBos) continue;
      if (best < 0 || lv(0, j) > lv(0, best)) best = j;
    }
    if (best == Vocabulary::kEos) break;
    if (best < v) {
      out.push(vocab_.token(best), TokenKind::Vocab, best);
    } else if (best < v + enc.n_g) {
      const int ref = best - v;
      out.push(join(preprocess_caption(geo.entities[static_cast<std::size_t>(ref)].entity.name), " "),
               TokenKind::Entity, ref);
    } else {
      const int ref = best - v - enc.n_g;
      out.push(join(preprocess_caption(knowledge.facts[static_cast<std::size_t>(ref)].fact.object_label), " "),
               TokenKind::Fact, ref);
    }
  }
  return out;
}

template <typename T>
std::vector<T> CaptionModel<T>::token_embedding(const ExampleInput& in, TokenKind kind, int ref) {
  Graph<T> g;
  Var row;
  switch (kind) {
    case TokenKind::Vocab:
      if (ref < 0 || ref >= vocab_.size()) throw DataError("vocabulary reference out of range");
      row = g.gather_rows(g.param(vocab_table_), {ref});
      break;
    case TokenKind::Entity:
      if (ref < 0 || ref >= in.geo_size()) throw DataError("entity reference out of range");
      row = g.gather_rows(geo_embeddings(g, in), {ref});
      break;
    case TokenKind::Fact:
      if (ref < 0 || ref >= in.knowledge_size()) throw DataError("fact reference out of range");
      row = g.gather_rows(fact_embeddings(g, geo_embeddings(g, in), in), {ref});
      break;
  }
  auto vals = g.value(row).values();
  return {vals.begin(), vals.end()};
}

template <typename T>
HeadWeights<T> CaptionModel<T>::head_weights() const {
  return HeadWeights<T>{w_pred_.value, w_vocab_.value, w_geo_.value, w_f_.value};
}

template <typename T>
TypeEmbedder CaptionModel<T>::type_embedder() const {
  return TypeEmbedder(type_tags_, type_table_.value.template cast<float>());
}

template <typename T>
PredicateVocabulary CaptionModel<T>::predicate_vocabulary() const {
  return PredicateVocabulary{SynonymMap{}, LabelEmbedding(predicates_, predicate_table_.value.template cast<float>())};
}

template <typename T>
template <typename U>
CaptionModel<U> CaptionModel<T>::cast() const {
  CaptionModel<U> out(config_, vocab_, type_tags_, predicates_);
  auto& self = const_cast<CaptionModel<T>&>(*this);
  auto src = self.parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].param->value = src[i].param->value.template cast<U>();
  return out;
}

template <typename T>
Adam<T>::Adam(std::vector<NamedParameter<T>> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.param->value.rows(), p.param->value.cols());
    v_.emplace_back(p.param->value.rows(), p.param->value.cols());
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.param->zero_grad();
}

template <typename T>
void Adam<T>::step(double clip) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k].param->value.values();
    auto gr = params_[k].param->grad.values();
    auto m = m_[k].values();
    auto v = v_[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      double gi = gr[i];
      if (clip > 0.0) gi = std::clamp(gi, -clip, clip);
      m[i] = static_cast<T>(beta1_ * m[i] + (1.0 - beta1_) * gi);
      v[i] = static_cast<T>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<T>(w[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

TrainResult train(CaptionModel<float>& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& validation_set, const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_set.empty()) throw DataError("empty training set");
  const ModelConfig& c = model.config();
  auto params = model.parameters();
  Adam<float> adam(params, c.lr);
  Rng rng(c.seed ^ 0x747261696e696e67ULL);

  std::vector<Tensor<float>> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& p : params) best.push_back(p.param->value);
  };

  TrainResult result;
  result.best_loss = std::numeric_limits<double>::infinity();
  int stale = 0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= c.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double total = 0.0;
    for (std::size_t idx : order) {
      adam.zero_grad();
      const float l = model.loss(train_set[idx], true, &rng, true);
      if (!std::isfinite(l)) throw NumericError("training loss is not finite at epoch " + std::to_string(epoch));
      total += l;
      adam.step(c.grad_clip);
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = total / static_cast<double>(train_set.size());
    if (!validation_set.empty()) {
      double v = 0.0;
      for (const auto& ex : validation_set) v += model.loss(ex, false, nullptr, false);
      log.validation_loss = v / static_cast<double>(validation_set.size());
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);

    const double monitored = log.validation_loss.value_or(log.train_loss);
    if (monitored < result.best_loss) {
      result.best_loss = monitored;
      result.best_epoch = epoch;
      stale = 0;
      snapshot();
    } else if (++stale >= c.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
    if (c.target_loss > 0.0 && log.train_loss < c.target_loss) {
      result.reached_target = true;
      return result;
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k].param->value = best[k];
  return result;
}

namespace {

constexpr char kCheckpointMagic[4] = {'G', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, CaptionModel<float>& model, const std::string& extra_json) {
  json header;
  header["format"] = "geocap-checkpoint";
  header["config"] = json::parse(config_to_json(model.config()));
  header["config_hash"] = hex64(model.config().hash());
  header["seed"] = model.config().seed;
  header["vocabulary"] = model.vocabulary().tokens();
  header["type_tags"] = model.type_tags();
  header["predicates"] = model.predicates();
  header["extra"] = json::parse(extra_json);
  json tensors = json::array();
  std::string data;
  for (const auto& p : model.parameters()) {
    tensors.push_back({{"name", p.name}, {"rows", p.param->value.rows()}, {"cols", p.param->value.cols()}});
    for (float x : p.param->value.values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      put_u32(data, bits);
    }
  }
  header["tensors"] = tensors;
  // The vocabulary vectors are part of the tensor table (vocab_table).
  const std::string head = header.dump();
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, head.size());
  out += head;
  out += data;
  write_file(path, out);
}

CaptionModel<float> load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || bytes.compare(0, 4, std::string(kCheckpointMagic, 4)) != 0)
    throw DataError(path + ": not a checkpoint file");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion)
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t head_len = get_le(bytes, 8, 8);
  if (16 + head_len > bytes.size()) throw DataError(path + ": truncated checkpoint header");
  json header;
  try {
    header = json::parse(bytes.substr(16, head_len));
  } catch (const json::exception& e) {
    throw DataError(path + ": corrupt checkpoint header: " + e.what());
  }
  const ModelConfig config = config_from_json(header.at("config").dump());
  if (header.at("config_hash").get<std::string>() != hex64(config.hash()))
    throw ConfigError(path + ": config hash does not match the config echo");
  const auto tokens = header.at("vocabulary").get<std::vector<std::string>>();
  CaptionModel<float> model(config, Vocabulary(tokens, Tensor<float>(static_cast<int>(tokens.size()), config.d)),
                            header.at("type_tags").get<std::vector<std::string>>(),
                            header.at("predicates").get<std::vector<std::string>>());
  auto params = model.parameters();
  const auto& table = header.at("tensors");
  if (table.size() != params.size())
    throw ConfigError(path + ": checkpoint holds " + std::to_string(table.size()) + " tensors, config implies " +
                      std::to_string(params.size()));
  std::size_t at = 16 + head_len;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k].param->value;
    const auto& entry = table[k];
    if (entry.at("name").get<std::string>() != params[k].name || entry.at("rows").get<int>() != value.rows() ||
        entry.at("cols").get<int>() != value.cols())
      throw ConfigError(path + ": tensor " + entry.at("name").get<std::string>() + " does not match the model layout");
    if (at + value.size() * 4 > bytes.size()) throw DataError(path + ": truncated tensor data");
    for (auto& x : value.values()) {
      const auto bits = static_cast<std::uint32_t>(get_le(bytes, at, 4));
      std::memcpy(&x, &bits, sizeof x);
      at += 4;
    }
  }
  if (at != bytes.size()) throw DataError(path + ": trailing bytes after tensor data");
  // Rebuild the vocabulary with the trained rows so value-level lookups agree.
  CaptionModel<float> restored(config, Vocabulary(tokens, model.parameter("vocab_table").value),
                               model.type_tags(), model.predicates());
  auto dst = restored.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) dst[k].param->value = params[k].param->value;
  return restored;
}

std::string checkpoint_extra(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || bytes.compare(0, 4, std::string(kCheckpointMagic, 4)) != 0)
    throw DataError(path + ": not a checkpoint file");
  const std::uint64_t head_len = get_le(bytes, 8, 8);
  if (16 + head_len > bytes.size()) throw DataError(path + ": truncated checkpoint header");
  return json::parse(bytes.substr(16, head_len)).at("extra").dump();
}

template Tensor<float> sinusoidal_positions<float>(int, int);
template Tensor<double> sinusoidal_positions<double>(int, int);
template HybridScores<float> hybrid_scores<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                                  const IndicatorState&, Variant, const HeadWeights<float>&);
template HybridScores<double> hybrid_scores<double>(const Tensor<double>&, const Tensor<double>&,
                                                    const Tensor<double>&, const IndicatorState&, Variant,
                                                    const HeadWeights<double>&);
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct MultiHeadAttention<float>;
template struct MultiHeadAttention<double>;
template struct EncoderLayer<float>;
template struct EncoderLayer<double>;
template struct DecoderLayer<float>;
template struct DecoderLayer<double>;
template class CaptionModel<float>;
template class CaptionModel<double>;
template CaptionModel<double> CaptionModel<float>::cast<double>() const;
template CaptionModel<float> CaptionModel<double>::cast<float>() const;
template CaptionModel<float> CaptionModel<float>::cast<float>() const;
template class Adam<float>;
template class Adam<double>;

}  // namespace geocap

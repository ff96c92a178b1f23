#include "relax/agent.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "relax/protocol.hpp"

namespace relax {

// ---------------------------------------------------------------------------
// parameters and config

AgentParams AgentParams::create(int state_dim, int n_slots, const std::vector<int>& hidden, std::uint64_t seed) {
  if (state_dim < 1 || n_slots < 1) throw ConfigError("agent needs a non-empty state and action set");
  std::vector<int> qs{state_dim + n_slots};
  qs.insert(qs.end(), hidden.begin(), hidden.end());
  qs.push_back(n_slots);
  std::vector<int> ps{state_dim};
  ps.insert(ps.end(), hidden.begin(), hidden.end());
  ps.push_back(n_slots);
  AgentParams p;
  p.q = DenseNet(qs, Activation::Identity, seed);
  p.policy = DenseNet(ps, Activation::Tanh, seed + 1);
  p.sync_targets();
  return p;
}

void AgentParams::sync_targets() {
  q_target = q;
  policy_target = policy;
}

long TrainConfig::local_budget() const {
  if (local_steps >= 0) return local_steps;
  return std::lround(local_fraction * static_cast<double>(total_steps()));
}

void TrainConfig::validate() const {
  if (per_sample_budget < 1) throw ConfigError("per_sample_budget must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (n_step < 1) throw ConfigError("n_step must be >= 1");
  if (eps_start < 0 || eps_start > 1 || eps_end < 0 || eps_end > 1 || local_eps_start < 0 || local_eps_start > 1)
    throw ConfigError("epsilon values must lie in [0, 1]");
  if (!(eps_decay_fraction > 0.0)) throw ConfigError("eps_decay_fraction must be > 0");
  if (explore_noise < 0) throw ConfigError("explore_noise must be >= 0");
  if (lr_q < 0 || lr_policy < 0 || lr_rnd_state < 0 || lr_rnd_action < 0)
    throw ConfigError("learning rates must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (replay_capacity < static_cast<std::size_t>(batch_size)) throw ConfigError("replay_capacity below batch_size");
  if (target_sync < 1) throw ConfigError("target_sync must be >= 1");
  if (hidden.empty() || *std::min_element(hidden.begin(), hidden.end()) < 1)
    throw ConfigError("hidden sizes must be positive");
  if (state_curiosity < 0 || action_curiosity < 0) throw ConfigError("curiosity scales must be >= 0");
  if (local_fraction < 0) throw ConfigError("local_fraction must be >= 0");
  if (neighbors < 0) throw ConfigError("neighbors must be >= 0");
  if (!(neighbor_radius > 0)) throw ConfigError("neighbor_radius must be > 0");
  if (probe_size < 1) throw ConfigError("probe_size must be >= 1");
}

#define RELAX_TRAIN_FIELDS(X)                                                                        \
  X(per_sample_budget) X(epochs) X(gamma) X(n_step) X(eps_start) X(eps_end) X(eps_decay_fraction)    \
  X(explore_noise) X(lr_q) X(lr_policy) X(lr_rnd_state) X(lr_rnd_action) X(clip_norm) X(batch_size)   \
  X(replay_capacity) X(priority_exponent) X(is_exponent_start) X(target_sync) X(learning_starts)      \
  X(hidden) X(state_curiosity) X(action_curiosity) X(probe_size) X(probe_every) X(local_fraction)     \
  X(local_steps) X(neighbors) X(neighbor_radius) X(local_eps_start) X(seed) X(checkpoint_path)        \
  X(checkpoint_every) X(resume)

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
#define X(f) j[#f] = f;
  RELAX_TRAIN_FIELDS(X)
#undef X
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
#define X(f) #f,
      RELAX_TRAIN_FIELDS(X)
#undef X
  };
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown train setting '" + k + "'");
  TrainConfig c;
  try {
#define X(f) \
  if (j.contains(#f)) j.at(#f).get_to(c.f);
    RELAX_TRAIN_FIELDS(X)
#undef X
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train setting: ") + e.what());
  }
  c.validate();
  return c;
}

#undef RELAX_TRAIN_FIELDS

// ---------------------------------------------------------------------------
// snapshot file

namespace {

constexpr char kSnapMagic[7] = {'R', 'L', 'X', 'S', 'N', 'A', 'P'};
constexpr std::uint32_t kSnapVersion = 1;

}  // namespace

void PolicySnapshot::save(const std::filesystem::path& path) const {
  nlohmann::json meta = {{"fingerprint", fingerprint()}, {"schema", schema.to_json()},
                         {"stats", stats.to_json()},     {"goal", goal.to_json()},
                         {"env", env.to_json()},         {"actionable", actionable},
                         {"info", info}};
  const std::string text = meta.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write snapshot " + path.string());
    out.write(kSnapMagic, sizeof kSnapMagic);
    io::write_u32(out, kSnapVersion);
    io::write_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_params(out, params.q);
    write_params(out, params.policy);
    write_params(out, params.q_target);
    write_params(out, params.policy_target);
    if (!out) throw ConfigError("short write on snapshot " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

PolicySnapshot PolicySnapshot::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open snapshot " + path.string());
  char magic[sizeof kSnapMagic];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + sizeof magic, kSnapMagic))
    throw ParseError(path.string() + ": not a policy snapshot");
  const auto version = io::read_u32(in);
  if (version != kSnapVersion) throw ParseError(path.string() + ": unsupported snapshot version " + std::to_string(version));
  const auto len = io::read_u32(in);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw ParseError(path.string() + ": truncated snapshot header");
  PolicySnapshot s;
  try {
    const auto meta = nlohmann::json::parse(text);
    s.schema = FeatureSchema::from_json(meta.at("schema"));
    s.stats = NormalizationStats::from_json(meta.at("stats"));
    s.goal = GoalSpec::from_json(meta.at("goal"));
    s.env = EnvConfig::from_json(meta.at("env"));
    s.actionable = meta.at("actionable").get<std::vector<int>>();
    s.info = meta.value("info", nlohmann::json::object());
    if (meta.at("fingerprint").get<std::string>() != s.schema.fingerprint())
      throw ParseError(path.string() + ": schema fingerprint does not match its schema");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad snapshot metadata: " + e.what());
  }
  s.params.q = read_params(in);
  s.params.policy = read_params(in);
  s.params.q_target = read_params(in);
  s.params.policy_target = read_params(in);
  const int n_slots = static_cast<int>(s.actionable.size());
  const int state_dim = static_cast<int>(s.schema.size()) + n_slots;
  if (s.params.policy.input_size() != state_dim || s.params.policy.output_size() != n_slots ||
      s.params.q.input_size() != state_dim + n_slots || s.params.q.output_size() != n_slots)
    throw ParseError(path.string() + ": network shapes do not match the schema");
  return s;
}

// ---------------------------------------------------------------------------
// acting

double to_interval(double u, const Interval& iv) { return iv.lo + 0.5 * (u + 1.0) * iv.width(); }

double to_units(double v, const Interval& iv) { return 2.0 * (v - iv.lo) / iv.width() - 1.0; }

namespace {

Vec concat(const Vec& a, const Vec& b) {
  Vec out(a.size() + b.size());
  out << a, b;
  return out;
}

Mat vstack(const Mat& a, const Mat& b) {
  Mat out(a.rows() + b.rows(), a.cols());
  out << a, b;
  return out;
}

// masked argmax, lowest index on ties; -1 when nothing is open
int masked_argmax(const Mat& values, const Mat& mask, Eigen::Index col) {
  int best = -1;
  double bv = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < values.rows(); ++k) {
    if (mask(k, col) < 0.5) continue;
    if (best < 0 || values(k, col) > bv) {
      best = static_cast<int>(k);
      bv = values(k, col);
    }
  }
  return best;
}

}  // namespace

ActionChoice select_action(const AgentParams& params, const CfEnv& env, const EnvState& state, double eps,
                           Rng& rng, double noise_fraction) {
  if (state.available.empty()) throw ContractViolation("select_action with an empty mask");
  const Vec enc = state.encode();
  const Vec u = params.policy.forward(enc);
  const Vec qv = params.q.forward(concat(enc, u));

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ActionChoice c;
  c.explored = eps > 0.0 && unif(rng) < eps;
  if (c.explored) {
    std::uniform_int_distribution<std::size_t> pick(0, state.available.size() - 1);
    c.slot = env.slot_of(state.available[pick(rng)]);
  } else {
    double best = -std::numeric_limits<double>::infinity();
    for (int f : state.available) {
      const int k = env.slot_of(f);
      if (c.slot < 0 || qv(k) > best || (qv(k) == best && k < c.slot)) {
        c.slot = k;
        best = qv(k);
      }
    }
  }
  const int feature = env.actionable()[static_cast<std::size_t>(c.slot)];
  const Interval iv = env.interval(feature);
  double v = to_interval(u(c.slot), iv);
  if (c.explored && noise_fraction > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_fraction * iv.width());
    v += noise(rng);
  }
  v = std::clamp(v, iv.lo, iv.hi);
  c.action = {feature, v};
  c.units = u;
  c.units(c.slot) = std::clamp(to_units(v, iv), -1.0, 1.0);
  return c;
}

// ---------------------------------------------------------------------------
// losses

PreparedBatch prepare_batch(const std::vector<const TransitionRecord*>& records, const Vec& weights,
                            int n_features) {
  if (records.empty()) throw ContractViolation("empty batch");
  const auto B = static_cast<Eigen::Index>(records.size());
  const auto sd = records.front()->state.size();
  const auto np = records.front()->params.size();
  PreparedBatch b;
  b.n_features = n_features;
  b.states.resize(sd, B);
  b.next_states.resize(sd, B);
  b.params.resize(np, B);
  b.rewards.resize(B);
  b.weights = weights.size() == B ? weights : Vec::Ones(B);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& r = *records[static_cast<std::size_t>(i)];
    b.states.col(i) = r.state;
    b.next_states.col(i) = r.next_state;
    b.params.col(i) = r.params;
    b.rewards(i) = r.reward;
    b.slots.push_back(r.slot);
    b.done.push_back(r.done);
    b.steps.push_back(r.steps);
  }
  return b;
}

Mat slot_mask(const Mat& states, int n_features) {
  const auto n_slots = states.rows() - n_features;
  return (states.bottomRows(n_slots).array() < 0.5).cast<double>().matrix();
}

Vec compute_targets(const AgentParams& params, const PreparedBatch& batch, double gamma) {
  const Mat u = params.policy_target.forward(batch.next_states);
  const Mat qn = params.q_target.forward(vstack(batch.next_states, u));
  const Mat mask = slot_mask(batch.next_states, batch.n_features);
  Vec y = batch.rewards;
  for (int i = 0; i < batch.size(); ++i) {
    if (batch.done[static_cast<std::size_t>(i)]) continue;
    const int k = masked_argmax(qn, mask, i);
    if (k < 0) continue;
    y(i) += std::pow(gamma, batch.steps[static_cast<std::size_t>(i)]) * qn(k, i);
  }
  return y;
}

QLoss loss_q(const DenseNet& q, const RndModule* rnd_state, const PreparedBatch& batch, const Vec& y) {
  const int B = batch.size();
  Tape tape;
  const Mat out = q.forward(vstack(batch.states, batch.params), tape);
  QLoss L;
  L.td.resize(B);
  Mat grad = Mat::Zero(out.rows(), out.cols());
  for (int i = 0; i < B; ++i) {
    const int k = batch.slots[static_cast<std::size_t>(i)];
    const double td = out(k, i) - y(i);
    L.td(i) = td;
    L.td_term += batch.weights(i) * td * td / B;
    grad(k, i) = 2.0 * batch.weights(i) * td / B;
  }
  L.q_grad = q.backward(tape, grad, DenseNet::Want::Params);
  if (rnd_state) L.distill_term = rnd_state->distill_loss(batch.next_states, &L.rnd_grad);
  L.value = L.td_term + L.distill_term;
  return L;
}

PiLoss loss_pi(const DenseNet& q, const DenseNet& policy, const RndModule* rnd_action, const Mat& states,
               int n_features, double action_scale) {
  const auto B = states.cols();
  const auto n_slots = policy.output_size();
  Tape tp, tq;
  const Mat u = policy.forward(states, tp);
  const Mat out = q.forward(vstack(states, u), tq);
  const Mat mask = slot_mask(states, n_features);

  PiLoss L;
  L.q_term = -(mask.array() * out.array()).sum() / static_cast<double>(B);
  Mat du = q.backward(tq, -mask / static_cast<double>(B), DenseNet::Want::Input).input.bottomRows(n_slots);

  L.greedy_slots.resize(static_cast<std::size_t>(B));
  for (Eigen::Index i = 0; i < B; ++i) L.greedy_slots[static_cast<std::size_t>(i)] = masked_argmax(out, mask, i);

  if (rnd_action) {
    Mat a = Mat::Zero(states.rows() + n_slots + 1, B);
    a.topRows(states.rows()) = states;
    for (Eigen::Index i = 0; i < B; ++i) {
      const int k = L.greedy_slots[static_cast<std::size_t>(i)];
      if (k < 0) continue;
      a(states.rows() + k, i) = 1.0;
      a(a.rows() - 1, i) = u(k, i);
    }
    if (action_scale != 0.0) {
      auto p = rnd_action->pass(a);
      const double c = action_scale * rnd_action->scale();
      L.novelty_term = -c * p.raw.mean();
      for (Eigen::Index i = 0; i < B; ++i) {
        const int k = L.greedy_slots[static_cast<std::size_t>(i)];
        if (k >= 0) du(k, i) += -c * p.input_grad(a.rows() - 1, i) / static_cast<double>(B);
      }
      L.distill_term = p.loss;
      L.rnd_grad = std::move(p.grad);
    } else {
      L.distill_term = rnd_action->distill_loss(a, &L.rnd_grad);
    }
  }
  L.policy_grad = policy.backward(tp, du, DenseNet::Want::Params);
  L.value = L.q_term + L.novelty_term + L.distill_term;
  return L;
}

// ---------------------------------------------------------------------------
// rollouts

CfResult generate_cf(const AgentParams& params, CfEnv& env, const Vec& x, const NormalizationStats* stats) {
  const auto t0 = std::chrono::steady_clock::now();
  EnvState s = env.reset(x);
  Rng unused(0);
  bool valid = false;
  while (!s.available.empty()) {
    const auto c = select_action(params, env, s, 0.0, unused, 0.0);
    auto r = env.apply(s, c.action);
    s = std::move(r.next);
    if (r.done == Done::Success) {
      valid = true;
      break;
    }
    if (r.done == Done::Budget) break;
  }
  CfResult res = make_result(x, s.x, valid);
  if (stats) res.proximity_raw = ((s.x - x).cwiseAbs().array() * (stats->max - stats->min).array()).sum();
  res.gen_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

CfEnv make_env(const PolicySnapshot& snapshot, PredictorPtr predictor) {
  if (!predictor) throw ConfigError("no predictor");
  check_compatible(*predictor, snapshot.schema);
  CfEnv env(std::move(predictor), snapshot.schema, snapshot.stats, snapshot.goal, snapshot.env);
  if (env.actionable() != snapshot.actionable)
    throw ConfigError("schema mismatch: actionable features differ from the snapshot");
  return env;
}

CfResult generate_cf(const PolicySnapshot& snapshot, const Vec& x, PredictorPtr predictor) {
  CfEnv env = make_env(snapshot, std::move(predictor));
  return generate_cf(snapshot.params, env, x, &snapshot.stats);
}

double probe_validity(const AgentParams& params, CfEnv& env, const Mat& rows) {
  if (rows.rows() == 0) return 0.0;
  int ok = 0;
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    if (generate_cf(params, env, rows.row(i).transpose()).valid) ++ok;
  return static_cast<double>(ok) / static_cast<double>(rows.rows());
}

std::string format_log_row(const LogRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "step=%ld epoch=%d loss_q=%.6g loss_pi=%.6g probe_validity=", row.step, row.epoch,
                row.loss_q, row.loss_pi);
  std::string s(buf);
  if (row.probe_validity) {
    std::snprintf(buf, sizeof buf, "%.4f", *row.probe_validity);
    s += buf;
  } else {
    s += "na";
  }
  return s;
}

// ---------------------------------------------------------------------------
// training

namespace {

OptimizerConfig adam(double lr, double clip) {
  OptimizerConfig c;
  c.learning_rate = lr;
  c.clip_norm = clip;
  return c;
}

bool eligible(CfEnv& env, const Vec& x) {
  if (env.goal().mode != GoalMode::Targeted) return true;
  return env.predictor().predict(x) != static_cast<double>(env.goal().target_class);
}

using Sampler = std::function<Vec(Rng&)>;

/// Mutable training state shared by the global and local loops.
class Learner {
 public:
  Learner(AgentParams p, CfEnv& env, const TrainConfig& cfg, std::uint64_t seed, long horizon, double eps_start)
      : params(std::move(p)),
        env_(env),
        cfg_(cfg),
        horizon_(std::max(1L, horizon)),
        eps_start_(eps_start),
        rng(seed),
        buffer_(ReplayConfig{cfg.replay_capacity, cfg.priority_exponent, 1e-3, true}),
        acc_(cfg.n_step, cfg.gamma) {
    RndConfig rs;
    rs.optimizer = adam(cfg.lr_rnd_state, cfg.clip_norm);
    rnd_state_ = RndModule(env.state_dim(), rs, seed * 31 + 7);
    RndConfig ra;
    ra.optimizer = adam(cfg.lr_rnd_action, cfg.clip_norm);
    rnd_action_ = RndModule(env.state_dim() + env.n_slots() + 1, ra, seed * 31 + 11);
    opt_q_ = Optimizer(adam(cfg.lr_q, cfg.clip_norm), params.q);
    opt_pi_ = Optimizer(adam(cfg.lr_policy, cfg.clip_norm), params.policy);
  }

  double epsilon() const {
    const double frac = std::min(1.0, static_cast<double>(step) / (cfg_.eps_decay_fraction * horizon_));
    return eps_start_ + (cfg_.eps_end - eps_start_) * frac;
  }

  void run(const Sampler& start, long interactions) {
    if (interactions <= 0) return;
    EnvState s = env_.reset(start(rng));
    for (long t = 0; t < interactions; ++t) {
      const auto c = select_action(params, env_, s, epsilon(), rng, cfg_.explore_noise);
      auto r = env_.apply(s, c.action);
      const Vec enc = s.encode();
      const Vec next = r.next.encode();
      double bonus = 0.0;
      if (cfg_.state_curiosity > 0.0) {
        const double raw = rnd_state_.raw_bonus(next);
        rnd_state_.observe(raw);
        bonus = raw * rnd_state_.scale();
      }
      TransitionRecord rec{enc, c.slot, c.units, combine_reward(r.reward, bonus, cfg_.state_curiosity), next,
                           r.done != Done::Continue, 1};
      for (auto& out : acc_.push(rec)) buffer_.push(std::move(out));
      update();
      ++step;
      if (r.done != Done::Continue) {
        s = env_.reset(start(rng));
      } else {
        s = std::move(r.next);
      }
    }
    for (auto& out : acc_.flush()) buffer_.push(std::move(out));
  }

  void update() {
    const auto need = static_cast<std::size_t>(std::max(cfg_.learning_starts, cfg_.batch_size));
    if (buffer_.size() < need) return;
    const double b = cfg_.is_exponent_start +
                     (1.0 - cfg_.is_exponent_start) * std::min(1.0, static_cast<double>(step) / horizon_);
    const auto sample = buffer_.sample(static_cast<std::size_t>(cfg_.batch_size), rng, b);
    const auto batch = prepare_batch(sample.records, sample.weights, env_.n_features());
    const Vec y = compute_targets(params, batch, cfg_.gamma);

    auto lq = loss_q(params.q, cfg_.state_curiosity > 0.0 ? &rnd_state_ : nullptr, batch, y);
    opt_q_.step(params.q, lq.q_grad);
    if (cfg_.state_curiosity > 0.0) rnd_state_.apply_gradients(lq.rnd_grad);
    buffer_.update_priorities(sample.indices, std::vector<double>(lq.td.data(), lq.td.data() + lq.td.size()));

    auto lp = loss_pi(params.q, params.policy, cfg_.action_curiosity > 0.0 ? &rnd_action_ : nullptr,
                      batch.states, env_.n_features(), cfg_.action_curiosity);
    opt_pi_.step(params.policy, lp.policy_grad);
    if (cfg_.action_curiosity > 0.0) {
      rnd_action_.apply_gradients(lp.rnd_grad);
      // keep the action bonus scale in step with what the policy sees
      for (int i = 0; i < batch.size(); ++i) {
        const int k = lp.greedy_slots[static_cast<std::size_t>(i)];
        if (k < 0) continue;
        const Vec a = action_input(batch.states.col(i), k, env_.n_slots(), batch.params(k, i));
        rnd_action_.observe(rnd_action_.raw_bonus(a));
        break;
      }
    }
    loss_q_sum_ += lq.value;
    loss_pi_sum_ += lp.value;
    ++n_losses_;
    if (++updates % cfg_.target_sync == 0) params.sync_targets();
  }

  std::pair<double, double> take_losses() {
    std::pair<double, double> out{0.0, 0.0};
    if (n_losses_ > 0) out = {loss_q_sum_ / n_losses_, loss_pi_sum_ / n_losses_};
    loss_q_sum_ = loss_pi_sum_ = 0.0;
    n_losses_ = 0;
    return out;
  }

  AgentParams params;
  long step = 0;
  long updates = 0;

 private:
  CfEnv& env_;
  const TrainConfig& cfg_;
  double horizon_;
  double eps_start_;

 public:
  Rng rng;

 private:
  PrioritizedBuffer buffer_;
  NStepAccumulator acc_;
  RndModule rnd_state_, rnd_action_;
  Optimizer opt_q_, opt_pi_;
  double loss_q_sum_ = 0.0, loss_pi_sum_ = 0.0;
  long n_losses_ = 0;
};

PolicySnapshot make_snapshot(const AgentParams& params, const FeatureSchema& schema, const NormalizationStats& stats,
                             const CfEnv& env) {
  PolicySnapshot s;
  s.params = params;
  s.schema = schema;
  s.stats = stats;
  s.goal = env.goal();
  s.env = env.config();
  s.actionable = env.actionable();
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TrainResult train_global(const Dataset& train, const NormalizationStats& stats, PredictorPtr predictor,
                         const GoalSpec& goal, const EnvConfig& env_config, const TrainConfig& config,
                         const LogSink& sink) {
  config.validate();
  if (!train.normalized) throw ConfigError("train_global needs a normalized dataset");
  if (train.size() == 0) throw ConfigError("empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  CfEnv env(std::move(predictor), train.schema, stats, goal, env_config);

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (eligible(env, train.row(i))) pool.push_back(i);
  if (pool.empty()) throw ConfigError("no training instance admits the goal");

  // held-out probe; shares rows with training only when data is scarce
  Rng split_rng(config.seed + 17);
  std::shuffle(pool.begin(), pool.end(), split_rng);
  const auto n_probe = std::min<std::size_t>(static_cast<std::size_t>(config.probe_size), pool.size());
  Mat probe(static_cast<Eigen::Index>(n_probe), train.n_features());
  for (std::size_t i = 0; i < n_probe; ++i) probe.row(static_cast<Eigen::Index>(i)) = train.rows.row(static_cast<Eigen::Index>(pool[i]));
  std::vector<std::size_t> draw(pool.size() >= 2 * n_probe ? pool.begin() + static_cast<long>(n_probe) : pool.begin(),
                                pool.end());

  AgentParams params = AgentParams::create(env.state_dim(), env.n_slots(), config.hidden, config.seed);
  int start_epoch = 0;
  long start_step = 0;
  if (config.resume && !config.checkpoint_path.empty() && std::filesystem::exists(config.checkpoint_path)) {
    auto ck = PolicySnapshot::load(config.checkpoint_path);
    if (ck.fingerprint() != train.schema.fingerprint() || ck.actionable != env.actionable())
      throw ConfigError("checkpoint was written for a different schema");
    params = ck.params;
    start_epoch = ck.info.at("progress").at("epoch").get<int>();
    start_step = ck.info.at("progress").at("step").get<long>();
  }

  Learner L(params, env, config, config.seed + 1000003ULL * static_cast<std::uint64_t>(start_epoch),
            config.total_steps(), config.eps_start);
  L.step = start_step;

  TrainResult result;
  auto checkpoint = [&](int epoch) {
    if (config.checkpoint_path.empty()) return;
    auto s = make_snapshot(L.params, train.schema, stats, env);
    s.info["progress"] = {{"epoch", epoch}, {"step", L.step}};
    s.info["train_config"] = config.to_json();
    s.save(config.checkpoint_path);
  };

  std::uniform_int_distribution<std::size_t> pick(0, draw.size() - 1);
  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const Vec x = train.row(draw[pick(L.rng)]);
    try {
      L.run([&x](Rng&) { return x; }, config.per_sample_budget);
    } catch (const TransportError&) {
      checkpoint(epoch);
      throw;
    }
    const bool last = epoch + 1 == config.epochs;
    if (config.checkpoint_every > 0 && ((epoch + 1) % config.checkpoint_every == 0 || last)) checkpoint(epoch + 1);
    if ((config.probe_every > 0 && (epoch + 1) % config.probe_every == 0) || last) {
      LogRow row;
      row.step = L.step;
      row.epoch = epoch + 1;
      std::tie(row.loss_q, row.loss_pi) = L.take_losses();
      try {
        row.probe_validity = probe_validity(L.params, env, probe);
      } catch (const TransportError&) {
        checkpoint(epoch + 1);
        throw;
      }
      result.log.push_back(row);
      if (sink) sink(row);
    }
  }

  result.snapshot = make_snapshot(L.params, train.schema, stats, env);
  result.steps = L.step - start_step;
  result.seconds = seconds_since(t0);
  result.snapshot.info["mode"] = "global";
  result.snapshot.info["steps"] = L.step;
  result.snapshot.info["train_seconds"] = result.seconds;
  result.snapshot.info["train_config"] = config.to_json();
  if (!result.log.empty() && result.log.back().probe_validity)
    result.snapshot.info["probe_validity"] = *result.log.back().probe_validity;
  return result;
}

TrainResult fine_tune_local(const PolicySnapshot& snapshot, const Vec& x_target, PredictorPtr predictor,
                            const TrainConfig& config, const LogSink& sink) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  CfEnv env = make_env(snapshot, std::move(predictor));
  TrainResult result;
  result.snapshot = snapshot;
  const long budget = config.local_budget();
  if (budget <= 0) return result;
  if (!eligible(env, x_target)) throw ConfigError("invalid goal: instance is already predicted as the target class");

  Rng nrng(config.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<Vec> starts{x_target};
  if (config.neighbors > 0)
    for (auto& v : sample_neighborhood(x_target, config.neighbor_radius, config.neighbors, nrng))
      if (eligible(env, v)) starts.push_back(std::move(v));

  Learner L(snapshot.params, env, config, config.seed + 77, budget, config.local_eps_start);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
  // half the episodes start at the target itself
  L.run([&](Rng& r) { return unif(r) < 0.5 ? starts.front() : starts[pick(r)]; }, budget);

  LogRow row;
  row.step = L.step;
  std::tie(row.loss_q, row.loss_pi) = L.take_losses();
  Mat one(1, x_target.size());
  one.row(0) = x_target.transpose();
  row.probe_validity = probe_validity(L.params, env, one);
  result.log.push_back(row);
  if (sink) sink(row);

  result.snapshot.params = L.params;
  result.steps = L.step;
  result.seconds = seconds_since(t0);
  result.snapshot.info["mode"] = "local";
  result.snapshot.info["local_steps"] = budget;
  result.snapshot.info["finetune_seconds"] = result.seconds;
  return result;
}

}  // namespace relax

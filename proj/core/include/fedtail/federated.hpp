#pragma once

// FedAvg client/server simulation: one local epoch per client per round,
// sample-count-weighted aggregation, an EMA teacher, and evaluation.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedtail/autograd.hpp"
#include "fedtail/data.hpp"
#include "fedtail/model.hpp"
#include "fedtail/objective.hpp"

namespace fedtail::fl {

using ad::ParamVector;
using model::ModelSpec;
using objective::CurvatureState;
using objective::FedTailConfig;
using objective::LossBreakdown;
using objective::QTDistribution;

class EmptyUpdateSet : public Error {
 public:
  using Error::Error;
};

struct SGDConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_size = 64;

  void validate() const;
};

enum class Aggregation { Weighted, Uniform };

struct ClientState {
  int client_id = 0;
  int domain_id = 0;
  std::shared_ptr<const data::DomainDataset> dataset;
  ParamVector local;
  // SGD momentum buffer; persists across rounds.
  std::vector<double> velocity;
  CurvatureState curvature;
  std::uint64_t seed = 0;
  long step = 0;
  int epochs = 0;
};

struct ServerState {
  ParamVector global;
  ParamVector teacher;
  int round = 0;
  QTDistribution qt;

  static ServerState start(ParamVector initial, QTDistribution qt);
};

struct TrainContext {
  const ModelSpec* spec = nullptr;
  SGDConfig sgd;
  FedTailConfig fedtail;
  const QTDistribution* qt = nullptr;
  // Required when fedtail.qt_mode is MomentumTeacher.
  const ParamVector* teacher = nullptr;
};

struct LocalResult {
  int client_id = 0;
  ParamVector params;
  std::size_t samples = 0;
  // Per-term means over the epoch's steps.
  LossBreakdown mean_losses;
  int steps = 0;
  bool ok = true;
  std::string error;
};

// Copies global into the client, runs one seeded-shuffled pass over its
// training split with SGD on the total objective. Numerical failure is
// reported through ok/error rather than thrown.
LocalResult local_train_epoch(ClientState& client, const ParamVector& global, const TrainContext& ctx);

struct Update {
  const ParamVector* params = nullptr;
  double sample_count = 0.0;
};

// Coordinate-wise mean weighted by n_i / sum n_j (or 1/K when uniform),
// accumulated in the order given.
ParamVector fedavg(std::span<const Update> updates, Aggregation mode = Aggregation::Weighted);

// m * teacher + (1 - m) * global
ParamVector teacher_update(const ParamVector& teacher, const ParamVector& global, double momentum);
void teacher_update(ServerState& server, double momentum);

struct EvalResult {
  double accuracy = 0.0;
  // Mean of per-class accuracies over classes with at least one sample.
  double macro_accuracy = 0.0;
  // NaN for classes with no samples.
  std::vector<double> per_class;
  std::size_t count = 0;
};

EvalResult evaluate(const ModelSpec& spec, const ParamVector& params, const data::DomainDataset& dataset,
                    std::span<const std::size_t> indices);
EvalResult evaluate(const ModelSpec& spec, const ParamVector& params, const data::DomainDataset& dataset);

struct ClientRoundInfo {
  int client_id = 0;
  int domain_id = 0;
  bool ok = true;
  std::string error;
  LossBreakdown losses;
  EvalResult val;
};

struct RoundReport {
  int round = 0;
  std::vector<ClientRoundInfo> clients;
  // Mean over participating clients, in client-id order.
  LossBreakdown mean_losses;
  EvalResult held_out;
  std::vector<double> gamma;
  double coherence_dot = 0.0;
  int participating = 0;
};

struct RoundOptions {
  TrainContext ctx;
  Aggregation aggregation = Aggregation::Weighted;
  int threads = 1;
};

// Broadcast, local epochs, FedAvg over successful clients (client-id
// order), teacher EMA, then evaluation. Throws NumericalError when no
// client finished.
RoundReport run_round(ServerState& server, std::vector<ClientState>& clients, const RoundOptions& options,
                      const data::DomainDataset* held_out = nullptr);

}  // namespace fedtail::fl

#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "mscg/acw.hpp"
#include "mscg/checkpoint.hpp"
#include "mscg/data.hpp"
#include "mscg/metrics.hpp"
#include "mscg/model.hpp"

namespace mscg {

struct LossRow {
    std::int64_t iteration = 0;
    double lr = 0, acw = 0, kl = 0, dl = 0, total = 0;
    const char* optimizer = "";
    bool skipped = false;
};

template <typename T>
class Trainer {
  public:
    Trainer(TrainConfig cfg, const DatasetManifest& manifest) : cfg_(std::move(cfg)), freq_(cfg_.classes) {
        cfg_.validate();
        if (manifest.size() == 0) throw data_error("empty dataset manifest");
        dataset_ = load_all<T>(manifest);
        CounterRng init(cfg_.seed);
        model_ = make_model<T>(cfg_, init);
        const auto n = static_cast<std::int64_t>(dataset_.size());
        iters_per_epoch_ = (n + cfg_.batch_size - 1) / cfg_.batch_size;
        total_iters_ = cfg_.epochs * iters_per_epoch_;
    }

    struct Outcome {
        std::vector<LossRow> log;
        std::string checkpoint_path;
        std::int64_t iterations = 0;
    };

    MscgNet<T>& model() { return model_; }
    const TrainConfig& config() const { return cfg_; }
    std::int64_t total_iterations() const { return total_iters_; }
    const ClassFrequencyState<T>& frequency_state() const { return freq_; }

    // Runs iterations [start, total) under the full cosine schedule;
    // stop_at_iter > 0 interrupts early (checkpointing there), so a later
    // resume continues the very same run.
    Outcome train(const std::string& out_dir, const std::string& resume_path = "", std::int64_t stop_at_iter = -1) {
        std::filesystem::create_directories(out_dir);
        std::int64_t start_iter = 0;
        if (!resume_path.empty()) {
            auto cp = Checkpoint<T>::load(resume_path);
            restore(cp); // also rebuilds the phase optimizer and fills its state
            start_iter = cp.meta_i64("iteration");
        }
        if (!optimizer_) make_phase_optimizer(start_iter, /*fresh=*/true);
        const std::int64_t end_iter = stop_at_iter > 0 ? std::min(stop_at_iter, total_iters_) : total_iters_;

        Outcome out;
        const std::string cp_path = out_dir + "/checkpoint.mscg";
        std::ofstream weights_csv;
        if (cfg_.loss == "acw") {
            weights_csv.open(out_dir + "/weights_log.csv", start_iter == 0 ? std::ios::trunc : std::ios::app);
            if (start_iter == 0) {
                weights_csv << "iteration";
                for (std::int64_t c = 0; c < cfg_.classes; ++c) weights_csv << ",class_" << c;
                weights_csv << "\n";
            }
        }

        for (std::int64_t iter = start_iter; iter < end_iter; ++iter) {
            if (iter == cfg_.adam_iters && optimizer_->name() != std::string("sgd")) {
                make_phase_optimizer(iter, /*fresh=*/true); // momentum phase starts with fresh state
            }
            const double lr = cosine_lr(iter, total_iters_, cfg_.base_lr);
            auto batch = next_batch(iter);
            CounterRng noise = CounterRng(cfg_.seed).fork(0x4E4F4953ull ^ static_cast<std::uint64_t>(iter));

            typename MscgNet<T>::Output fwd;
            try {
                fwd = model_.forward(batch.images, Mode::train, noise);
            } catch (const numeric_fault& e) {
                throw numeric_fault(std::string(e.what()) + " at iteration " + std::to_string(iter) +
                                    "; last good checkpoint: " +
                                    (last_checkpoint_.empty() ? "none" : last_checkpoint_));
            }
            auto y_tilde = softmax_channels(fwd.logits);

            LossRow row;
            row.iteration = iter;
            row.lr = lr;
            row.optimizer = optimizer_->name();
            NodePtr<T> objective;
            if (cfg_.loss == "acw") {
                const bool applied = update_frequency(freq_, batch.labels, batch.valid);
                if (applied) {
                    auto breakdown = acw_total(batch.labels, y_tilde, freq_, fwd.kl, fwd.dl, batch.valid);
                    if (!breakdown.skipped) {
                        objective = breakdown.total_node;
                        row.acw = static_cast<double>(breakdown.acw);
                        if (weights_csv.is_open()) {
                            weights_csv << iter;
                            for (std::int64_t c = 0; c < cfg_.classes; ++c)
                                weights_csv << ',' << breakdown.weights.at(c);
                            weights_csv << "\n";
                        }
                    }
                }
            } else {
                auto base = cfg_.loss == "dice" ? dice_loss(batch.labels, y_tilde, batch.valid)
                                                : cross_entropy_loss(batch.labels, y_tilde, batch.valid);
                objective = add(add(base, fwd.kl), fwd.dl);
                row.acw = static_cast<double>(base->value.item());
            }

            if (!objective) {
                row.skipped = true;
                out.log.push_back(row);
                continue;
            }
            row.kl = static_cast<double>(fwd.kl->value.item());
            row.dl = static_cast<double>(fwd.dl->value.item());
            row.total = static_cast<double>(objective->value.item());
            if (!std::isfinite(row.total)) {
                throw numeric_fault("loss diverged at iteration " + std::to_string(iter) +
                                    "; last good checkpoint: " + (last_checkpoint_.empty() ? "none" : last_checkpoint_));
            }

            model_.zero_grads();
            backward(objective);
            optimizer_->step(lr);
            out.log.push_back(row);

            if ((iter + 1) % iters_per_epoch_ == 0 || iter + 1 == end_iter) {
                save_checkpoint(cp_path, iter + 1);
                last_checkpoint_ = cp_path;
            }
        }

        write_loss_log(out_dir + "/train_log.csv", out.log);
        out.checkpoint_path = cp_path;
        out.iterations = end_iter - start_iter;
        return out;
    }

    // Eval-mode pass over the whole dataset (zero reparameterization noise,
    // running batchnorm statistics).
    std::pair<ConfusionState, MiouReport> evaluate() {
        if (dataset_.empty()) throw data_error("empty dataset");
        ConfusionState state(cfg_.classes);
        CounterRng unused(0);
        for (const auto& sample : dataset_) {
            auto fwd = model_.forward(sample.images, Mode::eval, unused);
            accumulate(state, fwd.logits->value, sample.labels, sample.valid);
        }
        auto report = miou(state);
        return {state, report};
    }

    void save_checkpoint(const std::string& path, std::int64_t iteration) {
        Checkpoint<T> cp;
        for (auto& p : model_.named_params()) cp.tensors.emplace("param/" + p.name, p.node->value);
        for (auto& [name, buf] : model_.named_buffers()) cp.tensors.emplace("buffer/" + name, *buf);
        for (auto& [slot, tensor] : optimizer_->state_entries()) cp.tensors.emplace("opt/" + slot, *tensor);
        cp.tensors.emplace("state/class_freq", freq_.f);
        cp.meta["iteration"] = std::to_string(iteration);
        cp.meta["freq_t"] = std::to_string(freq_.t);
        cp.meta["seed"] = std::to_string(cfg_.seed);
        cp.meta["optimizer"] = optimizer_->name();
        cp.meta["opt_t"] = std::to_string(optimizer_->step_count());
        cp.meta["config_hash"] = std::to_string(config_hash(cfg_));
        std::string cfg_text = canonical_config_text(cfg_);
        for (auto& ch : cfg_text) {
            if (ch == '\n') ch = ';';
        }
        cp.meta["config"] = cfg_text;
        cp.save(path);
    }

    void restore(const Checkpoint<T>& cp) {
        if (cp.meta.count("config_hash") && cp.meta.at("config_hash") != std::to_string(config_hash(cfg_))) {
            throw data_error("checkpoint config does not match the current configuration");
        }
        for (auto& p : model_.named_params()) {
            const auto& t = cp.require("param/" + p.name);
            if (t.shape != p.node->value.shape) {
                throw data_error("checkpoint shape mismatch for " + p.name + ": " + shape_str(t.shape) + " vs " +
                                 shape_str(p.node->value.shape));
            }
            p.node->value = t;
            p.node->grad.fill(T(0));
        }
        for (auto& [name, buf] : model_.named_buffers()) *buf = cp.require("buffer/" + name);
        freq_.f = cp.require("state/class_freq");
        freq_.t = cp.meta_i64("freq_t");
        const std::int64_t iter = cp.meta_i64("iteration");
        make_phase_optimizer(iter, /*fresh=*/true);
        if (cp.meta.count("optimizer") && cp.meta.at("optimizer") == optimizer_->name()) {
            for (auto& [slot, tensor] : optimizer_->state_entries()) {
                const std::string key = "opt/" + slot;
                if (cp.tensors.count(key)) *tensor = cp.tensors.at(key);
            }
            optimizer_->set_step_count(cp.meta_i64("opt_t"));
        }
    }

    static TrainConfig config_from_checkpoint_meta(const std::map<std::string, std::string>& meta) {
        auto it = meta.find("config");
        if (it == meta.end()) throw data_error("checkpoint carries no config block");
        TrainConfig cfg;
        std::string text = it->second;
        for (auto& ch : text) {
            if (ch == ';') ch = '\n';
        }
        std::istringstream in(text);
        for (const auto& [k, v] : parse_key_values(in)) apply_config_entry(cfg, k, v);
        cfg.validate();
        return cfg;
    }

    const char* optimizer_name() const { return optimizer_ ? optimizer_->name() : "none"; }

  private:
    SegmentationBatch<T> next_batch(std::int64_t iter) {
        const std::int64_t patch = cfg_.patch > 0 ? cfg_.patch : dataset_[0].height();
        return batch_for_iteration(dataset_, iter, cfg_.batch_size, patch, cfg_.flip_prob, cfg_.seed);
    }

    void make_phase_optimizer(std::int64_t iter, bool fresh) {
        (void)fresh;
        auto params = model_.named_params();
        if (iter < cfg_.adam_iters) {
            optimizer_ = std::make_unique<AdamOptimizer<T>>(std::move(params), cfg_.weight_decay,
                                                            cfg_.bias_lr_multiplier);
        } else {
            optimizer_ = std::make_unique<SgdOptimizer<T>>(std::move(params), cfg_.momentum, cfg_.weight_decay,
                                                           cfg_.bias_lr_multiplier);
        }
    }

    static void write_loss_log(const std::string& path, const std::vector<LossRow>& rows) {
        std::ofstream out(path, std::ios::trunc);
        out << "iteration,lr,optimizer,loss,kl,dl,total,skipped\n";
        out.precision(17);
        for (const auto& r : rows) {
            out << r.iteration << ',' << r.lr << ',' << r.optimizer << ',' << r.acw << ',' << r.kl << ',' << r.dl
                << ',' << r.total << ',' << (r.skipped ? 1 : 0) << '\n';
        }
    }

    TrainConfig cfg_;
    std::vector<SegmentationBatch<T>> dataset_;
    MscgNet<T> model_;
    ClassFrequencyState<T> freq_;
    std::unique_ptr<Optimizer<T>> optimizer_;
    std::int64_t iters_per_epoch_ = 1;
    std::int64_t total_iters_ = 1;
    std::string last_checkpoint_;
};

} // namespace mscg

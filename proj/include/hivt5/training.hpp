// SPDX-License-Identifier: Apache-2.0
//
// Three-stage recipe. Pretraining corrupts single pages with layout-aware
// span masking and reconstructs the spans from the page-summary vectors
// alone. Main training runs on two-page document views with a joint
// answer + page loss. Finetuning sees full-length documents with every
// encoder-side parameter frozen, so only the decoder and page head adapt.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hivt5/corpus.hpp"
#include "hivt5/errors.hpp"
#include "hivt5/model.hpp"
#include "hivt5/parallel.hpp"
#include "hivt5/tensor.hpp"

namespace hivt5 {

enum class Stage { pretrain, train, finetune };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::train: return "train";
        default: return "finetune";
    }
}

inline Stage stage_from(const std::string& s) {
    if (s == "pretrain") return Stage::pretrain;
    if (s == "train") return Stage::train;
    if (s == "finetune") return Stage::finetune;
    throw ValidationError("unknown stage '" + s + "'");
}

// Stages are monotone: a checkpoint may resume its own stage or feed the
// next one.
inline void require_stage_transition(Stage from, Stage to) {
    int f = static_cast<int>(from), t = static_cast<int>(to);
    if (t == f || t == f + 1) return;
    throw ValidationError(std::string("checkpoint in stage '") + stage_name(from) + "' cannot enter stage '" +
                          stage_name(to) + "'; expected a '" + stage_name(static_cast<Stage>(t == 0 ? 0 : t - 1)) +
                          "' checkpoint");
}

// ---------------------------------------------------------------------------
// layout-aware denoising
// ---------------------------------------------------------------------------

struct DenoiseExample {
    std::vector<std::size_t> input_ids;
    std::vector<Box> input_boxes;         // sentinels keep the box of the first masked token
    std::vector<std::size_t> target_ids;  // sentinel_i, span i tokens, ..., </s>
};

// Covers ~mask_ratio of the tokens with geometric-length spans (mean
// mean_span). Each span collapses to one sentinel carrying the span's first
// box; at least one token always stays visible.
inline DenoiseExample make_denoise_example(const std::vector<std::size_t>& ids, const std::vector<Box>& boxes,
                                           double mask_ratio, double mean_span, Rng& rng) {
    if (ids.empty() || ids.size() != boxes.size())
        throw ValidationError("make_denoise_example: page must be non-empty with one box per token");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw ConfigError("mask_ratio must lie in [0,1)");
    if (mean_span < 1.0) throw ConfigError("mean_span must be at least 1");
    std::size_t n = ids.size();
    auto n_mask = static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(n)));
    if (n_mask >= n) n_mask = n - 1;  // keep at least one visible token
    DenoiseExample ex;
    if (n_mask == 0) {
        ex.input_ids = ids;
        ex.input_boxes = boxes;
        ex.target_ids = {Vocabulary::kEnd};
        return ex;
    }
    std::size_t k = static_cast<std::size_t>(std::llround(static_cast<double>(n_mask) / mean_span));
    k = std::max<std::size_t>(1, std::min({k, n_mask, Vocabulary::kNumSentinels}));
    std::size_t total_gap = n - n_mask;
    k = std::min(k, total_gap + 1);  // interior gaps need one visible token each

    // geometric draws, adjusted so the lengths sum exactly to n_mask
    std::vector<std::size_t> lengths(k);
    std::size_t remaining = n_mask;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t left_for_rest = k - 1 - i;
        if (i == k - 1) {
            lengths[i] = remaining;
        } else {
            std::size_t cap = remaining - left_for_rest;
            std::size_t draw = rng.geometric(1.0 / mean_span);
            lengths[i] = std::min<std::size_t>(std::max<std::size_t>(draw, 1), cap);
        }
        remaining -= lengths[i];
    }
    // gap layout: one mandatory visible token between spans, the rest spread
    // uniformly over the k+1 gap slots
    std::vector<std::size_t> gaps(k + 1, 0);
    for (std::size_t i = 1; i < k; ++i) gaps[i] = 1;
    std::size_t extra = total_gap - (k - 1);
    for (std::size_t e = 0; e < extra; ++e) gaps[rng.below(k + 1)] += 1;

    std::size_t pos = 0;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t g = 0; g < gaps[i]; ++g, ++pos) {
            ex.input_ids.push_back(ids[pos]);
            ex.input_boxes.push_back(boxes[pos]);
        }
        ex.input_ids.push_back(Vocabulary::sentinel(i));
        ex.input_boxes.push_back(boxes[pos]);  // position information kept
        ex.target_ids.push_back(Vocabulary::sentinel(i));
        for (std::size_t m = 0; m < lengths[i]; ++m, ++pos) ex.target_ids.push_back(ids[pos]);
    }
    for (std::size_t g = 0; g < gaps[k]; ++g, ++pos) {
        ex.input_ids.push_back(ids[pos]);
        ex.input_boxes.push_back(boxes[pos]);
    }
    ex.target_ids.push_back(Vocabulary::kEnd);
    return ex;
}

// Splices the target spans back over the sentinels; inverse of the masking.
inline std::vector<std::size_t> denoise_reconstruct(const DenoiseExample& ex) {
    std::vector<std::vector<std::size_t>> spans(Vocabulary::kNumSentinels);
    std::size_t current = Vocabulary::kNumSentinels;
    for (std::size_t id : ex.target_ids) {
        if (id == Vocabulary::kEnd) break;
        if (id >= Vocabulary::kSentinelBase && id < Vocabulary::kSentinelBase + Vocabulary::kNumSentinels) {
            current = id - Vocabulary::kSentinelBase;
        } else {
            if (current == Vocabulary::kNumSentinels)
                throw ValidationError("denoise target does not start with a sentinel");
            spans[current].push_back(id);
        }
    }
    std::vector<std::size_t> out;
    for (std::size_t id : ex.input_ids) {
        if (id >= Vocabulary::kSentinelBase && id < Vocabulary::kSentinelBase + Vocabulary::kNumSentinels) {
            for (std::size_t t : spans[id - Vocabulary::kSentinelBase]) out.push_back(t);
        } else {
            out.push_back(id);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 3e-4;
    std::size_t warmup_steps = 100;
    std::size_t batch_size = 8;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double mask_ratio = 0.15;
    double mean_span = 3.0;
    std::size_t max_answer_len = 8;
    std::uint64_t seed = 7;

    void validate() const {
        if (!(mask_ratio > 0.0) || mask_ratio >= 1.0) throw ConfigError("mask_ratio must lie in (0,1)");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (lr <= 0.0) throw ConfigError("lr must be positive");
    }
};

// Linear warmup to the base rate, constant afterwards. Steps are 1-based.
inline double lr_at(const TrainConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.lr;
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

struct OptimizerState {
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Slot> slots;  // parallel to the parameter registry
    std::size_t step = 0;

    void init(const ParamList& params) {
        slots.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            slots[i].m.assign(params[i].second.size(), 0.0);
            slots[i].v.assign(params[i].second.size(), 0.0);
        }
        step = 0;
    }
};

// Decoupled weight decay Adam with bias correction. Frozen parameters are
// skipped entirely: neither values nor moments move.
inline void adamw_update(ParamList& params, OptimizerState& state, const TrainConfig& cfg,
                         const std::vector<bool>* frozen = nullptr) {
    if (state.slots.size() != params.size()) throw ContractError("optimizer state does not mirror parameters");
    state.step += 1;
    double lr = lr_at(cfg, state.step);
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        if (frozen && (*frozen)[pi]) continue;
        auto& [name, p] = params[pi];
        auto& g = p.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!std::isfinite(g[i]))
                throw NumericError("adamw: non-finite gradient in '" + name + "' at coordinate " +
                                   std::to_string(i));
        auto& slot = state.slots[pi];
        if (slot.m.size() != g.size()) throw ContractError("optimizer slot shape mismatch for '" + name + "'");
        auto& w = p.values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
            slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            double mhat = slot.m[i] / bc1;
            double vhat = slot.v[i] / bc2;
            w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * w[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

struct StepStats {
    std::size_t step = 0;
    Stage stage = Stage::pretrain;
    double answer_loss = 0.0;  // denoising loss during pretraining
    double page_loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

// Owns one stage of training over a corpus. Batch composition (sample picks,
// adjacent-page coins, masking layouts) is drawn sequentially from the data
// rng before any parallel work, and per-item gradients are reduced in batch
// order, so results are identical for every worker count.
class Trainer {
public:
    Trainer(HiVt5Model& model, const Corpus& corpus, TrainConfig cfg, Stage stage)
        : model_(model), corpus_(corpus), cfg_(cfg), stage_(stage), data_rng_(cfg.seed), params_(model.parameters()) {
        cfg_.validate();
        opt_.init(params_);
        frozen_.assign(params_.size(), false);
        if (stage_ == Stage::finetune)
            for (std::size_t i = 0; i < params_.size(); ++i)
                frozen_[i] = HiVt5Model::is_encoder_param(params_[i].first);
        for (std::size_t d = 0; d < corpus_.documents.size(); ++d) doc_index_[corpus_.documents[d].id] = d;
        for (std::size_t s = 0; s < corpus_.samples.size(); ++s)
            if (corpus_.samples[s].split == Split::train) sample_pool_.push_back(s);
        for (std::size_t d = 0; d < corpus_.documents.size(); ++d) {
            bool in_train = false;
            for (const auto& s : corpus_.samples) in_train = in_train || (s.doc_id == corpus_.documents[d].id &&
                                                                          s.split == Split::train);
            if (!in_train) continue;
            for (std::size_t p = 0; p < corpus_.documents[d].pages.size(); ++p) page_pool_.emplace_back(d, p);
        }
    }

    Stage stage() const { return stage_; }
    std::size_t step_count() const { return step_count_; }
    const OptimizerState& optimizer() const { return opt_; }
    OptimizerState& optimizer() { return opt_; }
    Rng& data_rng() { return data_rng_; }
    const ParamList& parameters() const { return params_; }
    const TrainConfig& config() const { return cfg_; }

    void restore(std::size_t step_count, std::uint64_t rng_state) {
        step_count_ = step_count;
        data_rng_.set_state(rng_state);
    }

    StepStats pretrain_step() {
        if (stage_ != Stage::pretrain) throw ContractError("pretrain_step: trainer is in stage " +
                                                           std::string(stage_name(stage_)));
        if (page_pool_.empty()) throw ValidationError("pretrain: no training pages");
        auto t0 = std::chrono::steady_clock::now();
        struct Item {
            PageInput page;
            std::vector<std::size_t> target;
        };
        std::vector<Item> batch;
        for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
            auto [di, pi] = page_pool_[data_rng_.below(page_pool_.size())];
            const Page& page = corpus_.documents[di].pages[pi];
            std::vector<std::size_t> ids;
            std::vector<Box> boxes;
            for (const auto& tok : page.tokens)
                for (std::size_t id : model_.vocab.encode(tok.text)) {
                    ids.push_back(id);
                    boxes.push_back(tok.box);
                }
            if (ids.empty()) {
                ids.push_back(Vocabulary::kUnk);
                boxes.push_back(Box{0, 0, 0, 0});
            }
            DenoiseExample ex = make_denoise_example(ids, boxes, cfg_.mask_ratio, cfg_.mean_span, data_rng_);
            Item item;
            item.page.question_ids = {};  // denoising runs without a question
            item.page.ocr_ids = ex.input_ids;
            item.page.ocr_boxes = ex.input_boxes;
            if (model_.cfg.use_visual && corpus_.documents[di].pages[pi].image)
                item.page.image = &*corpus_.documents[di].pages[pi].image;
            item.target = std::move(ex.target_ids);
            batch.push_back(std::move(item));
        }
        std::vector<double> losses(batch.size(), 0.0);
        std::vector<GradSink> sinks(batch.size());
        double inv_b = 1.0 / static_cast<double>(batch.size());
        parallel_for(batch.size(), [&](std::size_t i) {
            // reconstruct the masked spans from the page-summary vectors only
            Tensor k = model_.encode_page(batch[i].page);
            std::vector<std::size_t> dec_in = {Vocabulary::kStart};
            dec_in.insert(dec_in.end(), batch[i].target.begin(), batch[i].target.end() - 1);
            Tensor logits = model_.decoder_logits(k, dec_in);
            std::vector<int> targets(batch[i].target.begin(), batch[i].target.end());
            Tensor loss = cross_entropy(logits, targets);
            losses[i] = loss.item();
            backward(scale(loss, inv_b), &sinks[i]);
        });
        merge_sinks(sinks);
        StepStats stats = finish_step(t0);
        for (double l : losses) stats.answer_loss += l;
        stats.answer_loss /= static_cast<double>(losses.size());
        return stats;
    }

    StepStats train_step() {
        if (stage_ != Stage::train) throw ContractError("train_step: trainer is in stage " +
                                                        std::string(stage_name(stage_)));
        return qa_step(/*two_page_views=*/true, /*freeze_encoder=*/false);
    }

    StepStats finetune_step() {
        if (stage_ != Stage::finetune)
            throw ContractError("finetune_step: trainer stage is " + std::string(stage_name(stage_)) +
                                ", not finetune (encoder would not be frozen)");
        return qa_step(/*two_page_views=*/false, /*freeze_encoder=*/true);
    }

    StepStats step() {
        switch (stage_) {
            case Stage::pretrain: return pretrain_step();
            case Stage::train: return train_step();
            default: return finetune_step();
        }
    }

private:
    StepStats qa_step(bool two_page_views, bool freeze_encoder) {
        if (sample_pool_.empty()) throw ValidationError("training: no train-split samples");
        auto t0 = std::chrono::steady_clock::now();
        struct Item {
            std::vector<PageInput> pages;
            std::vector<std::size_t> answer_ids;
            std::size_t page_target = 0;
        };
        std::vector<Item> batch;
        for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
            const QASample& sample = corpus_.samples[sample_pool_[data_rng_.below(sample_pool_.size())]];
            const Document& doc = corpus_.documents[doc_index_.at(sample.doc_id)];
            Item item;
            if (two_page_views) {
                TwoPageView view = shorten_two_pages(sample, doc, data_rng_);
                for (std::size_t k = 0; k < view.page_indices.size(); ++k)
                    item.pages.push_back(make_page_input(model_.vocab, sample.question,
                                                         doc.pages[view.page_indices[k]], view.page_indices[k],
                                                         model_.cfg.use_visual));
                item.page_target = view.answer_pos;
            } else {
                item.pages = make_document_inputs(model_.vocab, sample.question, doc, model_.cfg.use_visual);
                item.page_target = sample.answer_page_idx;
            }
            item.answer_ids = model_.vocab.encode(sample.answers[0]);
            if (item.answer_ids.size() + 1 > cfg_.max_answer_len)
                item.answer_ids.resize(cfg_.max_answer_len - 1);
            batch.push_back(std::move(item));
        }
        std::vector<double> a_losses(batch.size(), 0.0), p_losses(batch.size(), 0.0);
        std::vector<GradSink> sinks(batch.size());
        double inv_b = 1.0 / static_cast<double>(batch.size());
        double lambda = model_.cfg.page_loss_weight;
        parallel_for(batch.size(), [&](std::size_t i) {
            const Item& item = batch[i];
            ModelOutput out;
            if (freeze_encoder) {
                // no graph behind the frozen encoder: D enters the decoder
                // and page head as a constant
                HiVt5Model::EncodedDocument enc;
                {
                    NoGradGuard frozen_encoder;
                    enc = model_.encode_document(item.pages);
                }
                std::vector<std::size_t> dec_in = {Vocabulary::kStart};
                dec_in.insert(dec_in.end(), item.answer_ids.begin(), item.answer_ids.end());
                out.answer_logits = model_.decoder_logits(enc.holistic, dec_in);
                out.page_logits = model_.page_head_logits(enc.page_vectors);
            } else {
                out = model_.forward_document(item.pages, item.answer_ids);
            }
            std::vector<int> targets;
            for (std::size_t id : item.answer_ids) targets.push_back(static_cast<int>(id));
            targets.push_back(static_cast<int>(Vocabulary::kEnd));
            Tensor answer_loss = cross_entropy(out.answer_logits, targets);
            Tensor page_loss = cross_entropy(reshape(out.page_logits, {1, model_.cfg.max_pages}),
                                             {static_cast<int>(item.page_target)});
            Tensor total = add(answer_loss, scale(page_loss, lambda));
            a_losses[i] = answer_loss.item();
            p_losses[i] = page_loss.item();
            backward(scale(total, inv_b), &sinks[i]);
        });
        merge_sinks(sinks);
        StepStats stats = finish_step(t0);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            stats.answer_loss += a_losses[i];
            stats.page_loss += p_losses[i];
        }
        stats.answer_loss /= static_cast<double>(batch.size());
        stats.page_loss /= static_cast<double>(batch.size());
        return stats;
    }

    // Fixed-order reduction: batch slot 0 first, registry order within a slot.
    void merge_sinks(std::vector<GradSink>& sinks) {
        for (auto& sink : sinks) {
            for (auto& [name, p] : params_) {
                const std::vector<double>* buf = sink.find(p.raw());
                if (!buf) continue;
                auto& g = p.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*buf)[i];
            }
        }
    }

    StepStats finish_step(std::chrono::steady_clock::time_point t0) {
        adamw_update(params_, opt_, cfg_, &frozen_);
        for (auto& [name, p] : params_) p.zero_grad();
        ++step_count_;
        StepStats stats;
        stats.step = step_count_;
        stats.stage = stage_;
        stats.lr = lr_at(cfg_, opt_.step);
        stats.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return stats;
    }

    HiVt5Model& model_;
    const Corpus& corpus_;
    TrainConfig cfg_;
    Stage stage_;
    Rng data_rng_;
    ParamList params_;
    OptimizerState opt_;
    std::vector<bool> frozen_;
    std::size_t step_count_ = 0;
    std::unordered_map<std::string, std::size_t> doc_index_;
    std::vector<std::size_t> sample_pool_;
    std::vector<std::pair<std::size_t, std::size_t>> page_pool_;
};

inline std::string step_log_header() { return "step,stage,answer_loss,page_loss,lr,wall_ms"; }

inline std::string step_log_row(const StepStats& s) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu,%s,%.12g,%.12g,%.12g,%.3f", s.step, stage_name(s.stage), s.answer_loss,
                  s.page_loss, s.lr, s.wall_ms);
    return buf;
}

}  // namespace hivt5

"""scikit-learn style estimator around :class:`~pgsam.model.PGSAMNet`."""

from __future__ import annotations

import copy
import io
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import PROMPT_MODES, ExpertReport, apply_transform, augment_transform, prompt_text
from .decoder import SegmentationOutput, VarianceTable, build_variance_table
from .encoder import EncoderConfig
from .exceptions import CheckpointMismatchError, TrainingDivergedError, ValidationError
from .losses import LossConfig, bce_dice_loss_logits, total_loss
from .metrics import dsc
from .model import ModelConfig, PGSAMNet
from .text import PromptSet, SpatialPriorMask, build_spatial_prior, make_provider
from .validation import check_available, check_images, check_masks, check_texts

logger = logging.getLogger(__name__)


@dataclass
class SampleSegmentation:
    """Per-sample prediction: one output per sequence plus the generated prompts."""

    outputs: list
    prompts: PromptSet | None
    coarse_mask: np.ndarray | None

    @property
    def final_masks(self) -> np.ndarray:
        return np.stack([o.final_mask for o in self.outputs])


class PGSAMSegmenter(BaseEstimator):
    """Expert-text-guided multi-sequence lesion segmenter.

    ``fit(X, y, reports=...)`` takes preprocessed slices ``X[n, c, 224, 224]``
    in [0, 1], binary lesion masks ``y[n, 224, 224]`` and, when the text
    pathway is enabled, one :class:`~pgsam.data.ExpertReport` (or raw string)
    per slice. ``predict_proba`` returns the averaged two-stage probability
    map for every sequence, ``predict`` its 0.5 threshold.

    The spatial prior and the class-variance table are built from ``y`` on
    the first ``fit`` unless given as ``prior`` / ``variance_table``.
    """

    def __init__(
        self,
        image_size=224,
        patch_size=16,
        embed_dim=64,
        encoder_depth=2,
        encoder_heads=4,
        lora_rank=5,
        n_sequences=4,
        decoder_depth=2,
        decoder_heads=4,
        use_cam=True,
        use_tpm=True,
        use_cmattn=True,
        use_lmca=True,
        prompt_mode="expert",
        text_provider="hash",
        adapter_bottleneck=32,
        prompt_threshold=0.5,
        fusion_value_mode="standard",
        learning_rate=1e-4,
        weight_decay=0.1,
        beta1=0.9,
        beta2=0.999,
        max_epochs=30,
        batch_size=8,
        patience=10,
        loss_w=0.5,
        loss_beta=0.5,
        dice_smooth=1e-5,
        augment=False,
        max_variance=0.1,
        pretrained_source=None,
        seed=0,
        warm_start=False,
        verbose=0,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.encoder_depth = encoder_depth
        self.encoder_heads = encoder_heads
        self.lora_rank = lora_rank
        self.n_sequences = n_sequences
        self.decoder_depth = decoder_depth
        self.decoder_heads = decoder_heads
        self.use_cam = use_cam
        self.use_tpm = use_tpm
        self.use_cmattn = use_cmattn
        self.use_lmca = use_lmca
        self.prompt_mode = prompt_mode
        self.text_provider = text_provider
        self.adapter_bottleneck = adapter_bottleneck
        self.prompt_threshold = prompt_threshold
        self.fusion_value_mode = fusion_value_mode
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.loss_w = loss_w
        self.loss_beta = loss_beta
        self.dice_smooth = dice_smooth
        self.augment = augment
        self.max_variance = max_variance
        self.pretrained_source = pretrained_source
        self.seed = seed
        self.warm_start = warm_start
        self.verbose = verbose

    # ------------------------------------------------------------- building

    def _model_config(self) -> ModelConfig:
        enc = EncoderConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.encoder_depth,
            num_heads=self.encoder_heads,
            lora_rank=self.lora_rank,
            pretrained_source=self.pretrained_source,
            init_seed=self.seed,
        )
        return ModelConfig(
            encoder=enc,
            n_sequences=self.n_sequences,
            decoder_depth=self.decoder_depth,
            decoder_heads=self.decoder_heads,
            text_dim=self._provider().dim if self.use_tpm else 256,
            adapter_bottleneck=self.adapter_bottleneck,
            use_cam=self.use_cam,
            use_tpm=self.use_tpm,
            use_cmattn=self.use_cmattn,
            use_lmca=self.use_lmca,
            fusion_value_mode=self.fusion_value_mode,
            prompt_threshold=self.prompt_threshold,
        )

    def _provider(self):
        if not self.use_tpm:
            return None
        if getattr(self, "_provider_cache", None) is None or self._provider_key != self.text_provider:
            self._provider_cache = make_provider(self.text_provider)
            self._provider_key = self.text_provider
        return self._provider_cache

    def _build(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ValidationError(f"unknown prompt_mode {self.prompt_mode!r}")
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.model_ = PGSAMNet(self._model_config())
        params = [p for p in self.model_.parameters() if p.requires_grad and p.numel()]
        self.optimizer_ = torch.optim.AdamW(
            params, lr=self.learning_rate, betas=(self.beta1, self.beta2), weight_decay=self.weight_decay
        )
        self.scheduler_ = torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer_, T_max=max(self.max_epochs, 1))
        self.noise_generator_ = torch.Generator().manual_seed(self.seed + 7919)
        self.epoch_ = 0
        self.history_ = []
        self.best_score_ = -math.inf
        self.best_state_ = None
        self.best_epoch_ = -1
        self.stale_epochs_ = 0
        provider = self._provider()
        self.provider_id_ = provider.provider_id if provider is not None else None

    # ---------------------------------------------------------------- text

    def _texts(self, reports, n):
        reports = check_texts(reports, n)
        if not self.use_tpm or self.prompt_mode == "none":
            return [None] * n
        out = []
        for r in reports:
            if self.prompt_mode == "expert" and isinstance(r, str):
                out.append(r)
            elif self.prompt_mode == "expert" and r is None:
                raise ValidationError("expert prompt mode needs a report for every slice")
            else:
                out.append(prompt_text(self.prompt_mode, r if isinstance(r, ExpertReport) else None))
        return out

    def _embed(self, texts):
        if not texts or texts[0] is None:
            return None
        provider = self._provider()
        cache = self.__dict__.setdefault("_embedding_cache", {})
        rows = []
        for t in texts:
            if t not in cache:
                cache[t] = provider.embed(t)
            rows.append(cache[t])
        return torch.as_tensor(np.stack(rows))

    # ------------------------------------------------------------- training

    def _batch_loss(self, out, yb, aw):
        cfg = LossConfig(self.loss_w, self.loss_beta, self.dice_smooth)
        gt = yb[:, None].expand_as(out.prior_logits)
        weight = aw.to(out.prior_logits.dtype)
        denom = weight.sum().clamp_min(1.0)
        l1 = (bce_dice_loss_logits(out.prior_logits, gt, cfg.dice_smooth, reduce=False) * weight).sum() / denom
        l2 = (bce_dice_loss_logits(out.refined_logits, gt, cfg.dice_smooth, reduce=False) * weight).sum() / denom
        if out.coarse_logits is not None:
            lp = bce_dice_loss_logits(out.coarse_logits, yb, cfg.dice_smooth)
        else:
            lp = torch.zeros((), dtype=l1.dtype)
        return total_loss(l1, l2, lp, cfg), (l1, l2, lp)

    def fit(self, X, y, reports=None, available=None, eval_set=None, prior=None, variance_table=None, callback=None):
        """Train on ``X``/``y``.

        ``eval_set`` is an optional ``(X_val, y_val, reports_val[, available_val])``
        tuple used for best-checkpoint selection (mean DSC) and early stopping.
        With ``warm_start=True`` an already-fitted estimator continues from its
        current epoch up to ``max_epochs``.
        """
        X = check_images(X, self.n_sequences, self.image_size)
        y = check_masks(y, X)
        available = check_available(available, X)
        texts = self._texts(reports, len(X))
        if not (self.warm_start and hasattr(self, "model_")):
            self._build()
            self.prior_ = prior if prior is not None else build_spatial_prior(list(y), self.image_size)
            self.variance_table_ = (
                variance_table if variance_table is not None else build_variance_table(list(y), 2, self.max_variance)
            )
        if len(X) == 0:
            raise ValidationError("cannot fit on an empty training set")
        n = len(X)
        while self.epoch_ < self.max_epochs:
            epoch = self.epoch_
            self.model_.train()
            order = np.random.default_rng([self.seed, epoch]).permutation(n)
            sums = np.zeros(4)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                xb, yb = X[idx], y[idx]
                if self.augment:
                    xb, yb = self._augment_batch(xb, yb, epoch, idx)
                xb_t, yb_t = torch.as_tensor(xb), torch.as_tensor(yb)
                out = self.model_(
                    xb_t,
                    self._embed([texts[i] for i in idx]),
                    self.prior_,
                    gt=yb_t,
                    table=self.variance_table_,
                    training=True,
                    generator=self.noise_generator_,
                )
                loss, parts = self._batch_loss(out, yb_t, torch.as_tensor(available[idx]))
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch starting {start}",
                        {"epoch": epoch, "batch": idx.tolist(), "components": [float(p) for p in parts]},
                    )
                self.optimizer_.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer_.step()
                sums += len(idx) * np.array([loss.item(), *(p.item() for p in parts)])
            record = dict(zip(("loss", "l_dec1", "l_dec2", "l_prompt"), (sums / n).tolist()))
            record["epoch"] = epoch
            record["lr"] = self.optimizer_.param_groups[0]["lr"]
            self.scheduler_.step()
            self.epoch_ += 1
            if eval_set is not None:
                score = self.score(*eval_set)
                record["val_dsc"] = score
                if score > self.best_score_:
                    self.best_score_, self.best_epoch_, self.stale_epochs_ = score, epoch, 0
                    self.best_state_ = self.model_.trainable_state_dict()
                else:
                    self.stale_epochs_ += 1
            self.history_.append(record)
            if self.verbose:
                logger.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in record.items() if k != "epoch"})
            if callback is not None:
                callback(self, record)
            if eval_set is not None and self.patience and self.stale_epochs_ >= self.patience:
                break
        if self.best_state_ is not None:
            self.model_.load_state_dict(self.best_state_, strict=False)
        return self

    def _augment_batch(self, xb, yb, epoch, idx):
        xs, ys = [], []
        for x, m, i in zip(xb, yb, idx):
            k, flip = augment_transform(int(np.random.SeedSequence([self.seed, epoch, int(i)]).generate_state(1)[0]))
            xs.append(apply_transform(x, k, flip))
            ys.append(apply_transform(m, k, flip))
        return np.stack(xs), np.stack(ys)

    # ------------------------------------------------------------ inference

    @torch.no_grad()
    def _forward(self, X, reports=None):
        check_is_fitted(self, "model_")
        X = check_images(X, self.n_sequences, self.image_size)
        texts = self._texts(reports, len(X))
        self.model_.eval()
        outs = []
        for start in range(0, len(X), self.batch_size):
            sl = slice(start, start + self.batch_size)
            outs.append(self.model_(torch.as_tensor(X[sl]), self._embed(texts[sl]), self.prior_, training=False))
        return outs

    def segment(self, X, reports=None) -> list[SampleSegmentation]:
        results = []
        for out in self._forward(X, reports):
            prior, refined = out.prior_mask.numpy(), out.refined_mask.numpy()
            coarse = torch.sigmoid(out.coarse_logits).numpy() if out.coarse_logits is not None else None
            for j in range(prior.shape[0]):
                results.append(
                    SampleSegmentation(
                        [SegmentationOutput(prior[j, s], refined[j, s]) for s in range(prior.shape[1])],
                        out.prompts[j] if out.prompts else None,
                        coarse[j] if coarse is not None else None,
                    )
                )
        return results

    def predict_proba(self, X, reports=None) -> np.ndarray:
        outs = self._forward(X, reports)
        if not outs:
            return np.zeros((0, self.n_sequences, self.image_size, self.image_size), np.float32)
        return np.concatenate([o.final_mask.numpy() for o in outs])

    def predict(self, X, reports=None) -> np.ndarray:
        return (self.predict_proba(X, reports) >= 0.5).astype(np.uint8)

    def score(self, X, y, reports=None, available=None) -> float:
        """Mean DSC over all available (slice, sequence) pairs."""
        X = check_images(X, self.n_sequences, self.image_size)
        y = check_masks(y, X)
        available = check_available(available, X)
        pred = self.predict(X, reports)
        scores = [dsc(pred[i, s], y[i]) for i in range(len(X)) for s in range(X.shape[1]) if available[i, s]]
        return float(np.mean(scores)) if scores else math.nan

    # ---------------------------------------------------------- checkpoints

    def state(self) -> dict:
        """Everything needed to rebuild the fitted estimator and resume training."""
        check_is_fitted(self, "model_")
        state = {
            "format": "pgsam-checkpoint/1",
            "params": self.get_params(),
            "trainable": self.model_.trainable_state_dict(),
            "optimizer": self.optimizer_.state_dict(),
            "scheduler": self.scheduler_.state_dict(),
            "noise_rng": self.noise_generator_.get_state(),
            "epoch": self.epoch_,
            "history": list(self.history_),
            "best_score": self.best_score_,
            "best_epoch": self.best_epoch_,
            "best_state": self.best_state_,
            "stale_epochs": self.stale_epochs_,
            "prior": {"weights": self.prior_.weights, "support_count": self.prior_.support_count},
            "variance_table": self.variance_table_.to_json(),
            "provider_id": self.provider_id_,
        }
        # Live tensors keep changing as training continues; snapshots must not alias them.
        return copy.deepcopy(state)

    def save(self, path) -> None:
        torch.save(self.state(), path)

    @classmethod
    def from_state(cls, state: dict, **overrides) -> "PGSAMSegmenter":
        params = dict(state["params"])
        params.update(overrides)
        est = cls(**params)
        provider = est._provider()
        provider_id = provider.provider_id if provider is not None else None
        if state["provider_id"] != provider_id:
            raise CheckpointMismatchError(
                f"checkpoint text provider {state['provider_id']!r} differs from {provider_id!r}"
            )
        est._build()
        missing, unexpected = est.model_.load_state_dict(state["trainable"], strict=False)
        if unexpected:
            raise CheckpointMismatchError(f"unexpected checkpoint keys: {unexpected[:5]}")
        est.optimizer_.load_state_dict(state["optimizer"])
        est.scheduler_.load_state_dict(state["scheduler"])
        est.noise_generator_.set_state(state["noise_rng"])
        est.epoch_ = state["epoch"]
        est.history_ = list(state["history"])
        est.best_score_ = state["best_score"]
        est.best_epoch_ = state["best_epoch"]
        est.best_state_ = state["best_state"]
        est.stale_epochs_ = state.get("stale_epochs", 0)
        est.prior_ = SpatialPriorMask(np.asarray(state["prior"]["weights"]), state["prior"]["support_count"])
        est.variance_table_ = VarianceTable.from_json(state["variance_table"])
        return est

    @classmethod
    def load(cls, path, **overrides) -> "PGSAMSegmenter":
        with open(path, "rb") as fh:
            buf = io.BytesIO(fh.read())
        return cls.from_state(torch.load(buf, map_location="cpu", weights_only=False), **overrides)

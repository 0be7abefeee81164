"""scikit-learn style estimator around the fusion network.

``X`` is a :class:`~emoart.dataset.DatasetManifest` (or a list of
``(record, person)`` pairs); targets travel inside the annotations, so ``y``
is accepted for API compatibility and ignored.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.utils.data import DataLoader, Dataset, Subset

from .dataset import (
    CATEGORY_NAMES,
    IMAGENET_MEAN,
    IMAGENET_STD,
    NUM_CATEGORIES,
    DatasetManifest,
    augment,
    compute_channel_stats,
    extract_body_crop,
    load_image,
    preprocess_context,
)
from .exceptions import DivergenceError, ValidationError
from .losses import DEFAULT_SMOOTHING, LossWeights, combined_loss, make_category_weights
from .metrics import MetricsReport, evaluate_predictions
from .model import ModelConfig, PredictionResult, build_model, predict_batch

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "step")
OPTIMIZERS = ("sgd", "adam")
NORMALIZATIONS = ("dataset", "imagenet")
RECALIBRATION_BATCH = 64


def _items(X):
    if isinstance(X, DatasetManifest):
        return list(X.iter_persons())
    return list(X)


def _sample_seed(base: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base, epoch, index]).generate_state(1)[0])


class PersonSamples(Dataset):
    """One sample per annotated person: body crop, context, multi-hot target, VAD target."""

    def __init__(self, items, body_side, context_side, mean, std, augment_seed=None, jitter=0.1, cache=True):
        self.items = items
        self.body_side = body_side
        self.context_side = context_side
        self.mean = mean
        self.std = std
        self.augment_seed = augment_seed
        self.jitter = jitter
        self.epoch = 0
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.items)

    def _inputs(self, i):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        record, person = self.items[i]
        image = load_image(record.path)
        out = (
            extract_body_crop(record, person, self.body_side, self.mean, self.std, image=image),
            preprocess_context(record, self.context_side, self.mean, self.std, image=image),
        )
        if self._cache is not None:
            self._cache[i] = out
        return out

    def __getitem__(self, i):
        body, context = self._inputs(i)
        if self.augment_seed is not None:
            body, context = augment(
                body, context, _sample_seed(self.augment_seed, self.epoch, i), jitter=self.jitter
            )
        _, person = self.items[i]
        return (
            torch.from_numpy(np.ascontiguousarray(body)),
            torch.from_numpy(np.ascontiguousarray(context)),
            torch.from_numpy(person.multi_hot()),
            torch.tensor(tuple(person.vad), dtype=torch.float32),
            i,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_loss_discrete: float
    train_loss_continuous: float
    learning_rate: float
    val_mean_ap: float | None = None
    val_mean_vad_error: float | None = None
    seconds: float = 0.0

    def to_dict(self):
        return asdict(self)


class EmotionRecognizer(BaseEstimator):
    """Body + context emotion recognizer with 26 discrete scores and VAD regression.

    Parameters mirror the model config, loss weighting and optimizer settings.
    Defaults: ResNet-18 trunks, 128 px body crops, Adam at lr 1e-3 with weight
    decay 5e-4 decayed x0.1 every 7 epochs, 25 epochs, batch 32, equal loss
    weights and ``1/ln(1.2 + p_k)`` category weights. ``optimizer="sgd"`` uses
    ``momentum``; with the summed 26-category loss it needs lr well below 1e-2.
    """

    def __init__(
        self,
        body_backbone="resnet18",
        context_backbone="resnet18",
        context_pretraining="scene_centric",
        body_crop_side=128,
        context_side=224,
        fusion_hidden=256,
        dropout=0.5,
        pretrained=True,
        weights_dir=None,
        lambda_discrete=0.5,
        lambda_continuous=0.5,
        weight_smoothing=DEFAULT_SMOOTHING,
        balance_categories=True,
        epochs=25,
        batch_size=32,
        optimizer="adam",
        learning_rate=0.001,
        momentum=0.9,
        weight_decay=5e-4,
        lr_schedule="step",
        lr_step=7,
        lr_gamma=0.1,
        augment=True,
        jitter=0.1,
        bn_recalibration=512,
        normalization="dataset",
        freeze_body=False,
        freeze_context=False,
        workers=0,
        device="cpu",
        random_state=0,
    ):
        self.body_backbone = body_backbone
        self.context_backbone = context_backbone
        self.context_pretraining = context_pretraining
        self.body_crop_side = body_crop_side
        self.context_side = context_side
        self.fusion_hidden = fusion_hidden
        self.dropout = dropout
        self.pretrained = pretrained
        self.weights_dir = weights_dir
        self.lambda_discrete = lambda_discrete
        self.lambda_continuous = lambda_continuous
        self.weight_smoothing = weight_smoothing
        self.balance_categories = balance_categories
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.lr_step = lr_step
        self.lr_gamma = lr_gamma
        self.augment = augment
        self.jitter = jitter
        self.bn_recalibration = bn_recalibration
        self.normalization = normalization
        self.freeze_body = freeze_body
        self.freeze_context = freeze_context
        self.workers = workers
        self.device = device
        self.random_state = random_state

    # -- helpers ---------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            body_backbone=self.body_backbone,
            context_backbone=self.context_backbone,
            context_pretraining=self.context_pretraining,
            body_crop_side=self.body_crop_side,
            context_side=self.context_side,
            fusion_hidden=self.fusion_hidden,
            dropout=self.dropout,
            pretrained=self.pretrained,
            weights_dir=self.weights_dir,
        )

    def _validate_params(self):
        if not (isinstance(self.epochs, int) and self.epochs >= 1):
            raise ValidationError(f"epochs must be a positive integer, got {self.epochs!r}")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ValidationError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not (isinstance(self.bn_recalibration, int) and self.bn_recalibration >= 0):
            raise ValidationError(f"bn_recalibration must be a non-negative integer, got {self.bn_recalibration!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValidationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.normalization not in NORMALIZATIONS:
            raise ValidationError(f"normalization must be one of {NORMALIZATIONS}")

    def _set_trainable(self, model):
        for enc, frozen in ((model.body_encoder, self.freeze_body), (model.context_encoder, self.freeze_context)):
            enc.requires_grad_(not frozen)

    def _train_mode(self, model):
        model.train()
        # frozen trunks keep their batch-norm statistics
        if self.freeze_body:
            model.body_encoder.eval()
        if self.freeze_context:
            model.context_encoder.eval()

    @torch.no_grad()
    def _recalibrate_bn(self, model, data, device):
        """Re-estimate batch-norm running statistics from un-augmented training samples.

        Running averages collected during training lag behind the weights, which
        shows up as a gap between train-mode and eval-mode predictions on small
        or fast-moving runs.
        """
        n = min(int(self.bn_recalibration), len(data))
        if n < 2:
            return
        self._train_mode(model)
        norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.training]
        momenta = [m.momentum for m in norms]
        for m in norms:
            m.reset_running_stats()
            m.momentum = None  # cumulative average over the pass
        plain = PersonSamples(data.items, data.body_side, data.context_side, data.mean, data.std)
        plain._cache = data._cache
        order = np.random.default_rng(int(self.random_state)).permutation(len(data))[:n]
        # large batches so per-batch variances approach the population variance
        batch = max(self.batch_size, RECALIBRATION_BATCH)
        for body, context, *_ in DataLoader(Subset(plain, order.tolist()), batch_size=batch):
            if body.shape[0] > 1:
                model(body.to(device), context.to(device))
        for m, momentum in zip(norms, momenta):
            m.momentum = momentum
        model.eval()

    # -- fit -------------------------------------------------------------

    def fit(self, X, y=None, X_val=None, on_epoch_end=None):
        """Train on ``X``; with ``X_val`` the epoch with the best validation mean AP is kept."""
        self._validate_params()
        if not isinstance(X, DatasetManifest):
            raise ValidationError("fit expects a DatasetManifest")
        items = _items(X)
        if len(items) < 2:
            raise ValidationError("training needs at least two annotated persons")
        if tuple(X.categories) != CATEGORY_NAMES:
            raise ValidationError(
                f"manifest declares {len(X.categories)} categories; the model has {NUM_CATEGORIES}"
            )
        self.categories_ = CATEGORY_NAMES

        seed = int(self.random_state)
        torch.manual_seed(seed)
        np.random.seed(seed % 2**32)
        device = torch.device(self.device)

        if self.normalization == "dataset":
            self.norm_mean_, self.norm_std_ = compute_channel_stats(X)
        else:
            self.norm_mean_, self.norm_std_ = IMAGENET_MEAN, IMAGENET_STD
        cat_w = (
            make_category_weights(X, self.weight_smoothing)
            if self.balance_categories
            else (1.0,) * NUM_CATEGORIES
        )
        self.loss_weights_ = LossWeights(self.lambda_discrete, self.lambda_continuous, cat_w)

        cfg = self.model_config()
        model = build_model(cfg, seed=seed).to(device)
        self._set_trainable(model)
        params = [p for p in model.parameters() if p.requires_grad]
        if self.optimizer == "sgd":
            optimizer = torch.optim.SGD(
                params, lr=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay
            )
        else:
            optimizer = torch.optim.Adam(params, lr=self.learning_rate, weight_decay=self.weight_decay)
        if self.lr_schedule == "step":
            scheduler = torch.optim.lr_scheduler.StepLR(optimizer, self.lr_step, self.lr_gamma)
        else:
            scheduler = None

        data = PersonSamples(
            items,
            cfg.body_crop_side,
            cfg.context_side,
            self.norm_mean_,
            self.norm_std_,
            augment_seed=seed if self.augment else None,
            jitter=self.jitter,
        )
        gen = torch.Generator().manual_seed(seed)
        loader = DataLoader(
            data,
            batch_size=self.batch_size,
            shuffle=True,
            generator=gen,
            num_workers=self.workers,
            # batch-norm in the fusion layer cannot train on a lone sample
            drop_last=len(data) > self.batch_size and len(data) % self.batch_size == 1,
        )

        self.model_ = model
        self.history_: list[EpochRecord] = []
        best_state, best_ap, self.best_epoch_ = None, -math.inf, None
        for epoch in range(1, self.epochs + 1):
            t0 = time.perf_counter()
            data.epoch = epoch
            self._train_mode(model)
            lr = optimizer.param_groups[0]["lr"]
            sums = np.zeros(3)
            seen = 0
            for batch_index, (body, context, t_disc, t_vad, _) in enumerate(loader):
                body, context = body.to(device), context.to(device)
                t_disc, t_vad = t_disc.to(device), t_vad.to(device)
                scores, vad = model(body, context)
                loss, d, c = combined_loss(scores, vad, t_disc, t_vad, self.loss_weights_)
                if not torch.isfinite(loss):
                    raise DivergenceError(epoch, batch_index, loss.item())
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                n = body.shape[0]
                sums += n * np.array([loss.item(), d.item(), c.item()])
                seen += n
            if scheduler is not None:
                scheduler.step()
            rec = EpochRecord(epoch, *(float(v) for v in sums / seen), learning_rate=float(lr))
            if X_val is not None:
                self._recalibrate_bn(model, data, device)
                model.eval()
                report = self.evaluate(X_val)
                rec.val_mean_ap = report.mean_ap
                rec.val_mean_vad_error = report.mean_vad_error
                score = report.mean_ap if not math.isnan(report.mean_ap) else -math.inf
                if best_state is None or score > best_ap:
                    best_ap, self.best_epoch_ = score, epoch
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            rec.seconds = time.perf_counter() - t0
            self.history_.append(rec)
            log.info(
                "epoch %d loss=%.4f (disc %.4f, vad %.4f) val_mAP=%s",
                epoch, rec.train_loss, rec.train_loss_discrete, rec.train_loss_continuous,
                "-" if rec.val_mean_ap is None else f"{100 * rec.val_mean_ap:.2f}",
            )
            if on_epoch_end is not None:
                on_epoch_end(self, rec)
        if best_state is not None:
            model.load_state_dict(best_state)
        else:
            self._recalibrate_bn(model, data, device)
            self.best_epoch_ = self.epochs
        model.eval()
        return self

    # -- inference -------------------------------------------------------

    def predict(self, X, batch_size: int | None = None) -> list[PredictionResult]:
        """One :class:`PredictionResult` per annotated person, in manifest order."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        return predict_batch(
            self.model_, _items(X), self.norm_mean_, self.norm_std_, batch_size or self.batch_size
        )

    def decision_function(self, X) -> np.ndarray:
        return np.stack([p.discrete_scores for p in self.predict(X)])

    def predict_vad(self, X) -> np.ndarray:
        return np.stack([p.vad_pred for p in self.predict(X)])

    def evaluate(self, X, source_tag=None, config_hash="", predominant_only=False) -> MetricsReport:
        items = _items(X)
        if not items:
            raise ValidationError("nothing to evaluate: no annotated persons")
        preds = self.predict(items)
        tag = source_tag if source_tag is not None else getattr(X, "source_tag", "")
        return evaluate_predictions(
            preds, [p for _, p in items], tag, config_hash, predominant_only
        )

    def score(self, X, y=None) -> float:
        """Mean average precision over categories present in ``X``."""
        return self.evaluate(X).mean_ap

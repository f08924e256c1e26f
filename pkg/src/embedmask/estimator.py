"""scikit-learn style wrapper around model construction, training and evaluation.

``fit`` runs the pretraining phase, ``finetune`` continues on reasoning data,
``predict`` returns one :class:`~embedmask.model.Prediction` per query and
``score`` is gIoU. Hyperparameters are plain constructor arguments so
``get_params``/``set_params``/``clone`` behave as in scikit-learn.
"""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import evaluate
from .model import ModelConfig, build_model
from .trainer import TrainConfig, load_checkpoint, run_training, save_checkpoint
from .validation import check_queries, check_samples


class ReasoningSegmenter(BaseEstimator):
    def __init__(
        self,
        model_config=None,
        lr=3e-4,
        weight_decay=0.0,
        warmup_iters=100,
        batch_per_step=2,
        grad_accum_steps=10,
        total_iters=2000,
        finetune_iters=300,
        mix_weights=None,
        seed=0,
        max_new_tokens=16,
        threshold=0.0,
    ):
        self.model_config = model_config
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_iters = warmup_iters
        self.batch_per_step = batch_per_step
        self.grad_accum_steps = grad_accum_steps
        self.total_iters = total_iters
        self.finetune_iters = finetune_iters
        self.mix_weights = mix_weights
        self.seed = seed
        self.max_new_tokens = max_new_tokens
        self.threshold = threshold

    def _train_config(self, total_iters):
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_iters=min(self.warmup_iters, total_iters),
            batch_per_step=self.batch_per_step,
            grad_accum_steps=self.grad_accum_steps,
            total_iters=total_iters,
            mix_weights=self.mix_weights,
            seed=self.seed,
        )

    def _model_config(self):
        cfg = self.model_config
        if cfg is None:
            return ModelConfig()
        return cfg if isinstance(cfg, ModelConfig) else ModelConfig(**cfg)

    def fit(self, X, y=None, log_fn=None):
        """Pretrain from scratch on ``X``; reasoning samples are excluded."""
        samples = check_samples(X)
        config = self._train_config(self.total_iters)
        model = build_model(self._model_config(), seed=self.seed)
        state = run_training(samples, config, "pretrain", model=model, log_fn=log_fn)
        self._set_state(state)
        return self

    def finetune(self, X, y=None, log_fn=None):
        """Continue from the fitted model on ``X`` with a fresh optimizer and schedule."""
        check_is_fitted(self, "model_")
        samples = check_samples(X)
        config = self._train_config(self.finetune_iters)
        state = run_training(samples, config, "finetune", model=self.model_, log_fn=log_fn)
        self._set_state(state)
        return self

    def _set_state(self, state):
        self.state_ = state
        self.model_ = state.model
        self.history_ = list(state.history)
        self.n_iter_ = state.iteration

    def predict(self, X):
        """One Prediction per Sample or (image, instruction) pair."""
        check_is_fitted(self, "model_")
        queries = check_queries(X, self.model_.config.image_size)
        self.model_.eval()
        return [
            self.model_.predict(img, instr, max_new=self.max_new_tokens, threshold=self.threshold)
            for img, instr in queries
        ]

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        samples = check_samples(X, require_masks=True)
        self.model_.eval()
        return evaluate(_Thresholded(self.model_, self.threshold), samples, max_new=self.max_new_tokens)

    def score(self, X, y=None):
        """gIoU over the masked samples of ``X``."""
        return self.evaluate(X).rows["overall"]["gIoU"]

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.state_, self._train_config(max(self.n_iter_, 1)))

    @classmethod
    def load(cls, path, **params):
        state = load_checkpoint(path)
        est = cls(model_config=state.model.config.to_dict(), **params)
        est._set_state(state)
        return est


class _Thresholded:
    """Adapter giving metrics.evaluate a predictor with a non-default threshold."""

    def __init__(self, model, threshold):
        self.model = model
        self.threshold = threshold

    def predict(self, image, instruction, max_new=None):
        return self.model.predict(image, instruction, max_new=max_new, threshold=self.threshold)

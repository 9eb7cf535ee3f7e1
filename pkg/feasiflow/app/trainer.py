"""
Maximum-likelihood training of a flow on feasible embeddings.

Every source of randomness hangs off TrainConfig.seed: parameter init uses the seed
directly, while batch shuffling and the Monte-Carlo normalizer estimates use child
streams of SeedSequence(seed). Two runs with the same config are bit-identical.
"""

import json
import logging
import time
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from feasiflow.app.base_dist import ResamplingBase, resampling_init_Z, resampling_update_Z
from feasiflow.app.checkpoint import save_checkpoint
from feasiflow.app.coupling_flow import FlowModel, build_flow, flow_log_prob_batch, flow_log_prob_grad
from feasiflow.app.data_pipeline import Label, LabeledDataset
from feasiflow.app.errors import ConfigError, DataError, DensityError, DomainError, TrainingError
from feasiflow.app.evaluator import auroc
from feasiflow.app.nn_core import AdamState, adam_step
from feasiflow.app.schemas import EpochRecord, TrainConfig, TrainReport

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.ffck"
REPORT_FILE = "train_report.jsonl"


def periodic_checkpoint_name(epoch: int) -> str:
    return f"checkpoint_e{epoch:04d}.ffck"


def _training_matrix(train_set: Union[LabeledDataset, np.ndarray]) -> np.ndarray:
    if isinstance(train_set, LabeledDataset):
        if train_set.count(Label.INFEASIBLE):
            raise DataError(
                f"training set holds {train_set.count(Label.INFEASIBLE)} infeasible rows; train on feasible rows only"
            )
        x = train_set.embeddings
    else:
        x = np.asarray(train_set, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError(f"training set must be a non-empty N x h matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("training set contains non-finite values")
    return x


class _Validator:
    """Computes the model-selection criterion on the validation split."""

    def __init__(self, val_set: Optional[LabeledDataset], exact: bool):
        self.exact = exact
        self.data = val_set if val_set is not None and len(val_set) else None
        self.has_feasible = self.data is not None and self.data.count(Label.FEASIBLE) > 0
        if self.data is not None and self.data.has_both_labels():
            self.name = "auroc"
            labeled = [i for i, label in enumerate(self.data.labels) if label is not None]
            self.data = self.data.subset(labeled)
        elif self.has_feasible:
            self.name = "val_log_likelihood"
        else:
            self.name = "none"

    def __call__(self, model: FlowModel) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        """(mean feasible log-likelihood, auroc, criterion)."""
        if self.name == "none":
            return None, None, None
        try:
            scores = flow_log_prob_batch(model, self.data.embeddings, exact=self.exact).total
        except DensityError as exc:
            logger.warning("validation scoring failed (%s); criterion set to -inf", exc)
            return None, None, -np.inf
        if not np.all(np.isfinite(scores)):
            return None, None, -np.inf
        positive = np.array([label is Label.FEASIBLE for label in self.data.labels], dtype=bool)
        val_ll = float(np.mean(scores[positive])) if positive.any() else None
        val_auroc = auroc(scores, positive) if self.name == "auroc" else None
        return val_ll, val_auroc, val_auroc if self.name == "auroc" else val_ll


def train(
    config: TrainConfig,
    train_set: Union[LabeledDataset, np.ndarray],
    val_set: Optional[LabeledDataset] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> Tuple[FlowModel, TrainReport]:
    """
    Fit a fresh flow by Adam on the mean negative log-likelihood of `train_set`.

    Selection: validation AUROC when the validation split carries both labels, else mean
    feasible validation log-likelihood, else the last epoch. Early stopping fires after
    `early_stop_patience` epochs without strict improvement (0 disables it).
    """
    x = _training_matrix(train_set)
    n, dim = x.shape
    if val_set is not None and len(val_set) and val_set.dim != dim:
        raise ConfigError(f"validation dimension {val_set.dim} does not match training dimension {dim}")

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    mc_rng = np.random.default_rng(seeds[1])

    def mc_seed() -> int:
        return int(mc_rng.integers(0, 2 ** 63))

    model = build_flow(
        dim,
        config.num_coupling_layers,
        width=config.conditioner_width,
        depth=config.conditioner_depth,
        scale_clamp=config.scale_clamp,
        base_kind=config.base_kind,
        seed=config.seed,
        accept_width=config.accept_width,
        accept_depth=config.accept_depth,
        truncation=config.resampling_T,
        ema_decay=config.ema_decay,
    )
    resampling = isinstance(model.base, ResamplingBase)
    if resampling:
        z0 = resampling_init_Z(model.base, n_mc=config.z_init_samples, seed=mc_seed())
        logger.info("initial normalizer estimate Z=%.6f", z0)

    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT_FILE).write_text("", encoding="utf-8")

    validator = _Validator(val_set, exact=config.exact_kernels)
    report = TrainReport(criterion=validator.name, num_parameters=model.num_parameters())
    logger.info(
        "training %d-layer %s flow (%d parameters) on %d samples, h=%d, selection by %s",
        config.num_coupling_layers, model.base_kind.value, report.num_parameters, n, dim, validator.name,
    )

    params = model.get_flat_params()
    adam = AdamState.fresh(params.size)
    best_params, best_z = params.copy(), model.base.z_ema if resampling else None
    best_criterion = -np.inf
    stale_epochs = 0
    global_step = 0

    for epoch in tqdm(range(1, config.epochs + 1), desc="train", disable=not config.progress):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        nll_sum = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            if resampling:
                resampling_update_Z(model.base, n_mc=config.n_mc, seed=mc_seed())
            try:
                grad = flow_log_prob_grad(model, x[rows], exact=config.exact_kernels, batch_index=batch_index)
                params, adam = adam_step(params, grad.grads, adam, config.learning_rate,
                                         epoch=epoch, step=global_step)
            except (TrainingError, DensityError) as exc:
                exc.context.update(epoch=epoch, step=global_step)
                if "sample" in exc.context:
                    exc.context["row"] = int(rows[exc.context["sample"]])
                raise
            model.set_flat_params(params)
            nll_sum += grad.loss * rows.size
            global_step += 1

        train_nll = nll_sum / n
        if not np.isfinite(train_nll):
            raise TrainingError("non-finite training loss", epoch=epoch, step=global_step)
        val_ll, val_auroc, criterion = validator(model)
        record = EpochRecord(
            epoch=epoch,
            train_nll=train_nll,
            val_log_likelihood=val_ll,
            val_auroc=val_auroc,
            criterion=None if criterion is None or not np.isfinite(criterion) else float(criterion),
            z_ema=model.base.z_ema if resampling else None,
            seconds=time.perf_counter() - started,
        )
        report.history.append(record)
        logger.info(
            "epoch %d: train_nll=%.6f val_ll=%s val_auroc=%s (%.2fs)",
            epoch, train_nll, val_ll, val_auroc, record.seconds,
        )

        if out is not None:
            # wall-clock time stays out of the file so identical runs write identical reports
            with (out / REPORT_FILE).open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record.model_dump(exclude={"seconds"}), sort_keys=True) + "\n")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(model, out / periodic_checkpoint_name(epoch))

        if criterion is None:
            best_params, best_z = params.copy(), model.base.z_ema if resampling else None
            report.best_epoch = epoch
            continue
        if criterion > best_criterion:
            best_criterion = criterion
            best_params, best_z = params.copy(), model.base.z_ema if resampling else None
            report.best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if config.early_stop_patience and stale_epochs >= config.early_stop_patience:
                report.stopped_early = True
                logger.info("early stop at epoch %d, best epoch %s", epoch, report.best_epoch)
                break

    if report.history:
        model.set_flat_params(best_params)
        if resampling:
            model.base.z_ema = best_z
        if np.isfinite(best_criterion):
            report.best_criterion = float(best_criterion)

    if out is not None:
        report.checkpoint_path = str(save_checkpoint(model, out / BEST_CHECKPOINT))
    return model, report

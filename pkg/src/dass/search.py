"""Three-step search: dense pre-training, sparsity-aware pruning with
architecture updates, and fine-tuning of the derived sparse network.

The baseline pipeline shares step 1 bitwise, derives its genotype from the
dense architecture parameters, and applies score learning plus top-k pruning
to the derived network as post-processing with no architecture updates.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .checkpoint import (load_checkpoint, rng_state_from_json, rng_state_to_json,
                         save_checkpoint)
from .config import ConfigError, SearchConfig
from .data import DataSplit, epoch_batches, gen_synthetic, load_cifar10
from .genotype import Genotype, derive, deserialize, instantiate, serialize
from .metrics import (MetricsReport, accuracy, compression_rate, count_params,
                      dataset_loss, loss_curves_csv, nid)
from .optim import SGD, cosine_lr
from .space import Supernet, operation_set
from .sparse import DENSE, MASKED, SCORE_SCALED

PHASES = ("pretrain", "prune", "finetune", "done")


class NumericAbort(RuntimeError):
    """Non-finite loss encountered; surfaced instead of clipped (CLI exit code 2)."""


class PhaseOrderError(RuntimeError):
    """Pipeline steps invoked out of order."""


def load_dataset(config: SearchConfig) -> DataSplit:
    if config.dataset == "synthetic":
        return gen_synthetic(config.synthetic_n, config.n_classes,
                             config.synthetic_image_size, config.seed,
                             amplitude=config.synthetic_amplitude)
    data_dir = config.resolved_data_dir()
    if not data_dir:
        raise ConfigError("dataset 'cifar10-subset' needs data_dir or $DASS_DATA_DIR")
    return load_cifar10(data_dir, config.subset_size, config.train_val_split, config.seed)


def _set_rg(params, flag: bool):
    for p in params:
        p.requires_grad = flag


def _augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random 4-pixel-pad crop plus horizontal flip."""
    n, c, h, w = x.shape
    pad = 4
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offs[i]
        crop = xp[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


class SearchRun:
    """One deterministic search run (either the full method or the baseline)."""

    def __init__(self, config: SearchConfig, data: DataSplit | None = None,
                 method: str = "dass", out_dir: str | Path | None = None):
        if method not in ("dass", "baseline"):
            raise ValueError(f"method must be 'dass' or 'baseline', got {method!r}")
        config.validate()
        self.config = config
        self.method = method
        self.data = data if data is not None else load_dataset(config)
        self.out_dir = Path(out_dir) if out_dir is not None else None

        model_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([config.seed, 1])))
        self.train_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([config.seed, 2])))
        self.supernet = Supernet(
            model_rng, n_cells=config.n_cells, steps=config.steps,
            init_channels=config.init_channels, n_classes=self.data.n_classes,
            op_names=operation_set(config.include_zero_op),
            double_sep_conv=config.double_sep_conv)
        self.derived = None
        self.genotype: Genotype | None = None
        self.phase = "pretrain"
        self.curves: dict[str, list] = {"pretrain": [], "prune": [], "finetune": []}
        self.purity = {"step1_scores_grad_max": 0.0, "step2_theta_grad_max": 0.0,
                       "step3_alpha_grad_max": 0.0, "step3_scores_grad_max": 0.0}
        self.meta: dict = {"method": method, "seed": config.seed,
                           "pruning_ratio": config.pruning_ratio}
        self.report: MetricsReport | None = None
        self._last_velocities: list[tuple[str, np.ndarray]] = []

        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config_resolved.json").write_text(config.to_json())

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------

    def _require_phase(self, phase: str):
        if self.phase != phase:
            raise PhaseOrderError(f"expected phase {phase!r}, run is in {self.phase!r}")

    def _check_finite(self, loss: float, lr: float, epoch: int, batch: int):
        if not math.isfinite(loss):
            raise NumericAbort(
                f"non-finite loss {loss} in phase {self.phase} "
                f"(epoch={epoch}, batch={batch}, lr={lr:g})")

    def _record_purity(self, key: str, params):
        worst = self.purity[key]
        for p in params:
            if p.grad is not None:
                worst = max(worst, float(np.max(np.abs(p.grad))))
        self.purity[key] = worst

    def _train_batches(self):
        x, y = self.data.train_x, self.data.train_y
        batches = epoch_batches(x, y, self.config.batch_size, self.train_rng)
        if self.config.augment:
            batches = [(_augment_batch(xb, self.train_rng), yb) for xb, yb in batches]
        return batches

    def _val_batches(self):
        batches = epoch_batches(self.data.val_x, self.data.val_y,
                                self.config.batch_size, self.train_rng)
        if not batches and len(self.data.train_y) >= self.config.batch_size:
            raise ConfigError(
                f"validation split ({len(self.data.val_y)} points) is smaller than "
                f"one batch ({self.config.batch_size}); shrink batch_size or grow "
                f"the split")
        return batches

    # ------------------------------------------------------------------
    # step 1: dense pre-training (alternating theta / alpha updates)
    # ------------------------------------------------------------------

    def step1_pretrain(self):
        self._require_phase("pretrain")
        cfg, net = self.config, self.supernet
        thetas = net.theta_parameters()
        alphas = net.alpha_parameters()
        scores = net.score_parameters()
        _set_rg(scores, False)
        th_opt = SGD(thetas, cfg.lr_theta, cfg.momentum, cfg.weight_decay)
        al_opt = SGD(alphas, cfg.lr_alpha, cfg.momentum, cfg.alpha_weight_decay)
        net.set_training(True)

        for epoch in range(cfg.epochs_pretrain):
            th_opt.lr = cosine_lr(epoch, cfg.epochs_pretrain, cfg.lr_theta)
            train_b = self._train_batches()
            val_b = self._val_batches()
            total = 0.0
            for i, (xb, yb) in enumerate(train_b):
                # theta step on a train batch, alpha held fixed
                _set_rg(alphas, False)
                loss = ad.cross_entropy(net(Tensor(xb), DENSE), yb)
                backward(loss)
                self._check_finite(loss.item(), th_opt.lr, epoch, i)
                self._record_purity("step1_scores_grad_max", scores)
                th_opt.step()
                total += loss.item()

                # alpha step on a val batch, theta held fixed
                xv, yv = val_b[i % len(val_b)]
                _set_rg(thetas, False)
                _set_rg(alphas, True)
                loss_v = ad.cross_entropy(net(Tensor(xv), DENSE), yv)
                backward(loss_v)
                self._check_finite(loss_v.item(), al_opt.lr, epoch, i)
                self._record_purity("step1_scores_grad_max", scores)
                al_opt.step()
                _set_rg(thetas, True)
            val_loss = dataset_loss(net, self.data.val_x, self.data.val_y, DENSE)
            self.curves["pretrain"].append((epoch, total / max(len(train_b), 1), val_loss))
        self._last_velocities = th_opt.state_tensors("opt.pretrain.theta") \
            + al_opt.state_tensors("opt.pretrain.alpha")
        self.phase = "prune"

    # ------------------------------------------------------------------
    # step 2: score learning and sparsity-aware architecture updates
    # ------------------------------------------------------------------

    def step2_prune(self):
        self._require_phase("prune")
        cfg, net = self.config, self.supernet
        sparse_params = [sp for _, sp in net.named_sparse_params()]
        for sp in sparse_params:
            sp.set_ratio(cfg.pruning_ratio)
            sp.reset_scores()
            sp.rebinarize()
        alphas = net.alpha_parameters()
        if cfg.alpha_init_mode == "fresh":
            for p in alphas:
                p.data = (1e-3 * self.train_rng.standard_normal(p.data.shape)
                          ).astype(np.float32)
        alpha_entry = [p.data.copy() for p in alphas]

        thetas = net.theta_parameters()
        scores = net.score_parameters()
        _set_rg(thetas, False)  # theta frozen for the whole phase
        s_opt = SGD(scores, cfg.lr_score, cfg.momentum, cfg.weight_decay)
        al_opt = SGD(alphas, cfg.lr_alpha, cfg.momentum, cfg.alpha_weight_decay)
        net.set_training(True)

        for epoch in range(cfg.epochs_prune):
            s_opt.lr = cosine_lr(epoch, cfg.epochs_prune, cfg.lr_score)
            train_b = self._train_batches()
            val_b = self._val_batches()
            total = 0.0
            for i, (xb, yb) in enumerate(train_b):
                # (a) score step on a train batch in the continuous relaxation
                _set_rg(alphas, False)
                _set_rg(scores, True)
                loss = ad.cross_entropy(net(Tensor(xb), SCORE_SCALED), yb)
                backward(loss)
                self._check_finite(loss.item(), s_opt.lr, epoch, i)
                self._record_purity("step2_theta_grad_max", thetas)
                s_opt.step()
                total += loss.item()

                # (b) recompute the binary mask from the updated scores
                for sp in sparse_params:
                    sp.rebinarize()

                # (c) alpha step on a val batch against the masked network
                xv, yv = val_b[i % len(val_b)]
                _set_rg(scores, False)
                _set_rg(alphas, True)
                loss_v = ad.cross_entropy(net(Tensor(xv), MASKED), yv)
                backward(loss_v)
                self._check_finite(loss_v.item(), al_opt.lr, epoch, i)
                self._record_purity("step2_theta_grad_max", thetas)
                al_opt.step()
            val_loss = dataset_loss(net, self.data.val_x, self.data.val_y, MASKED)
            self.curves["prune"].append((epoch, total / max(len(train_b), 1), val_loss))

        for sp in sparse_params:
            if sp.popcount() != sp.k:
                raise AssertionError(f"mask popcount {sp.popcount()} != k {sp.k}")
        # descent bookkeeping: val loss under the frozen final mask, entry vs final alpha
        final_alpha = [p.data.copy() for p in alphas]
        for p, a in zip(alphas, alpha_entry):
            p.data = a
        self.meta["prune_val_loss_entry_alpha"] = dataset_loss(
            net, self.data.val_x, self.data.val_y, MASKED)
        for p, a in zip(alphas, final_alpha):
            p.data = a
        self.meta["prune_val_loss_final_alpha"] = dataset_loss(
            net, self.data.val_x, self.data.val_y, MASKED)
        self._last_velocities = s_opt.state_tensors("opt.prune.score") \
            + al_opt.state_tensors("opt.prune.alpha")
        _set_rg(thetas, True)
        self.phase = "finetune"

    def step2_prune_baseline(self):
        """Score learning on the already-derived network; no architecture updates."""
        self._require_phase("prune")
        cfg, net = self.config, self.derived
        if net is None:
            raise PhaseOrderError("baseline pruning requires the derived network")
        sparse_params = [sp for _, sp in net.named_sparse_params()]
        for sp in sparse_params:
            sp.set_ratio(cfg.pruning_ratio)
            sp.reset_scores()
        thetas = net.theta_parameters()
        scores = net.score_parameters()
        _set_rg(thetas, False)
        _set_rg(scores, True)
        s_opt = SGD(scores, cfg.lr_score, cfg.momentum, cfg.weight_decay)
        net.set_training(True)

        for epoch in range(cfg.epochs_prune):
            s_opt.lr = cosine_lr(epoch, cfg.epochs_prune, cfg.lr_score)
            train_b = self._train_batches()
            total = 0.0
            for i, (xb, yb) in enumerate(train_b):
                loss = ad.cross_entropy(net(Tensor(xb), SCORE_SCALED), yb)
                backward(loss)
                self._check_finite(loss.item(), s_opt.lr, epoch, i)
                self._record_purity("step2_theta_grad_max", thetas)
                s_opt.step()
                total += loss.item()
            val_loss = dataset_loss(net, self.data.val_x, self.data.val_y, SCORE_SCALED)
            self.curves["prune"].append((epoch, total / max(len(train_b), 1), val_loss))

        for sp in sparse_params:
            sp.rebinarize()
            if sp.popcount() != sp.k:
                raise AssertionError(f"mask popcount {sp.popcount()} != k {sp.k}")
        self._last_velocities = s_opt.state_tensors("opt.prune.score")
        _set_rg(thetas, True)
        self.phase = "finetune"

    # ------------------------------------------------------------------
    # step 3: fine-tune the surviving weights under the frozen mask
    # ------------------------------------------------------------------

    def _finetune_net(self):
        if self.config.finetune_target == "supernet":
            return self.supernet
        if self.derived is None:
            raise PhaseOrderError("fine-tuning requires the derived network")
        return self.derived

    def step3_finetune(self):
        self._require_phase("finetune")
        cfg = self.config
        net = self._finetune_net()
        thetas = net.theta_parameters()
        scores = net.score_parameters()
        alphas = self.supernet.alpha_parameters() if net is self.supernet else []
        _set_rg(thetas, True)
        _set_rg(scores, False)
        _set_rg(alphas, False)
        mask_snapshot = {name: sp.mask.tobytes()
                         for name, sp in net.named_sparse_params()}
        th_opt = SGD(thetas, cfg.lr_finetune, cfg.momentum, cfg.weight_decay)
        net.set_training(True)

        for epoch in range(cfg.epochs_finetune):
            th_opt.lr = cosine_lr(epoch, cfg.epochs_finetune, cfg.lr_finetune)
            train_b = self._train_batches()
            total = 0.0
            for i, (xb, yb) in enumerate(train_b):
                loss = ad.cross_entropy(net(Tensor(xb), MASKED), yb)
                backward(loss)
                self._check_finite(loss.item(), th_opt.lr, epoch, i)
                self._record_purity("step3_alpha_grad_max", alphas)
                self._record_purity("step3_scores_grad_max", scores)
                th_opt.step()
                total += loss.item()
            val_loss = dataset_loss(net, self.data.val_x, self.data.val_y, MASKED)
            self.curves["finetune"].append((epoch, total / max(len(train_b), 1), val_loss))

        for name, sp in net.named_sparse_params():
            if sp.mask.tobytes() != mask_snapshot[name]:
                raise AssertionError(f"mask of {name} changed during fine-tuning")
        self._last_velocities = th_opt.state_tensors("opt.finetune.theta")
        self.phase = "done"

    # ------------------------------------------------------------------
    # derivation, checkpoints, orchestration
    # ------------------------------------------------------------------

    def derive_genotype(self) -> Genotype:
        sup = self.supernet
        alpha_r = sup.alpha_reduce.data if sup.alpha_reduce is not None else None
        return derive(sup.alpha_normal.data, alpha_r, sup.op_names, sup.steps)

    def _instantiate_derived(self):
        cfg = self.config
        self.genotype = self.derive_genotype()
        # scratch mode re-initializes weights but keeps the sparse structure
        self.derived = instantiate(
            self.genotype, self.train_rng, n_cells=cfg.n_cells,
            init_channels=cfg.init_channels, n_classes=self.data.n_classes,
            double_sep_conv=cfg.double_sep_conv, inherit_from=self.supernet,
            masks_only=(cfg.finetune_mode == "scratch"))
        self.meta["test_acc_after_prune"] = accuracy(
            self.derived, self.data.test_x, self.data.test_y, MASKED)

    def _state_tensors(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for prefix, net in (("supernet.", self.supernet), ("derived.", self.derived)):
            if net is None:
                continue
            for name, p in net.named_parameters():
                out.append((prefix + name, p.data))
            for name, b in net.named_buffers():
                out.append((prefix + name, b))
        out.extend(self._last_velocities)
        return out

    def _sparse_k_table(self) -> dict:
        table = {}
        for prefix, net in (("supernet.", self.supernet), ("derived.", self.derived)):
            if net is None:
                continue
            for name, sp in net.named_sparse_params():
                table[prefix + name] = sp.k
        return table

    def save_state(self, path: str | Path):
        header = {
            "phase": self.phase,
            "method": self.method,
            "config_hash": self.config.hash(),
            "rng_state": rng_state_to_json(self.train_rng),
            "genotype": serialize(self.genotype) if self.genotype else None,
            "sparse_k": self._sparse_k_table(),
            "epochs_completed": {k: len(v) for k, v in self.curves.items()},
            "curves": self.curves,
            "purity": self.purity,
            "meta": self.meta,
        }
        save_checkpoint(path, header, self._state_tensors())

    def _load_state(self, header: dict, tensors: dict):
        if header.get("genotype"):
            self.genotype = deserialize(header["genotype"])
            cfg = self.config
            self.derived = instantiate(
                self.genotype, np.random.default_rng(0), n_cells=cfg.n_cells,
                init_channels=cfg.init_channels, n_classes=self.data.n_classes,
                double_sep_conv=cfg.double_sep_conv)
        k_table = header.get("sparse_k", {})
        for prefix, net in (("supernet.", self.supernet), ("derived.", self.derived)):
            if net is None:
                continue
            for name, p in net.named_parameters():
                p.data = tensors[prefix + name].copy()
            for name, sp in net.named_sparse_params():
                sp.set_mask(tensors[prefix + name + ".mask"].copy())
                sp.k = int(k_table.get(prefix + name, sp.k))
            for name, b in net.named_buffers():
                if name.endswith(".mask"):
                    continue
                b[...] = tensors[prefix + name]
        self.train_rng = rng_state_from_json(header["rng_state"])
        self.phase = header["phase"]
        self.curves = {k: [tuple(row) for row in v] for k, v in header["curves"].items()}
        self.purity = dict(header["purity"])
        self.meta = dict(header["meta"])

    @classmethod
    def resume(cls, config: SearchConfig, ckpt_path: str | Path,
               data: DataSplit | None = None,
               out_dir: str | Path | None = None) -> "SearchRun":
        header, tensors = load_checkpoint(ckpt_path, expect_config_hash=config.hash())
        run = cls(config, data=data, method=header["method"], out_dir=out_dir)
        run._load_state(header, tensors)
        return run

    def _ckpt_path(self, stage: str) -> Path | None:
        if self.out_dir is None:
            return None
        return self.out_dir / f"checkpoint_{stage}.ckpt"

    def run(self, stop_after: str | None = None) -> MetricsReport | None:
        """Execute the remaining phases; optionally stop after a named phase."""
        if self.phase == "pretrain":
            self.step1_pretrain()
            if self.method == "baseline":
                self._instantiate_derived()
            if self.out_dir is not None:
                self.save_state(self._ckpt_path("pretrain"))
            if stop_after == "pretrain":
                return None
        if self.phase == "prune":
            if self.method == "dass":
                self.step2_prune()
                self._instantiate_derived()
            else:
                self.step2_prune_baseline()
                self.meta["test_acc_after_prune"] = accuracy(
                    self.derived, self.data.test_x, self.data.test_y, MASKED)
            if self.out_dir is not None:
                self.save_state(self._ckpt_path("prune"))
            if stop_after == "prune":
                return None
        if self.phase == "finetune":
            self.step3_finetune()
            if self.out_dir is not None:
                self.save_state(self._ckpt_path("finetune"))
        return self.finalize()

    @property
    def final_net(self):
        return self._finetune_net()

    def finalize(self) -> MetricsReport:
        if self.phase != "done":
            raise PhaseOrderError(f"run not finished, phase is {self.phase!r}")
        cfg = self.config
        net = self.final_net
        d = self.data
        test_acc = accuracy(net, d.test_x, d.test_y, MASKED)
        train_acc = accuracy(net, d.train_x, d.train_y, MASKED)
        total, nonzero = count_params(net)
        baseline_params = cfg.compression_baseline_params or float(total)
        # the composed pipeline optimizes effective weights theta * mask exactly
        masked_zero = all(
            not np.any((sp.theta.data * sp.mask)[sp.mask == 0])
            for _, sp in net.named_sparse_params())
        self.meta.update({
            "purity": dict(self.purity),
            "genotype": serialize(self.genotype).strip() if self.genotype else None,
            "masked_effective_weights_zero": bool(masked_zero),
            "train_accuracy": train_acc,
        })
        report = MetricsReport(
            top1_accuracy=test_acc,
            params_total=int(total),
            params_nonzero=int(nonzero),
            compression_rate=compression_rate(baseline_params, max(nonzero, 1)),
            nid=nid(test_acc, max(nonzero, 1) / 1000.0),
            generalization_gap=train_acc - test_acc,
            loss_curves={k: [list(r) for r in v] for k, v in self.curves.items()},
            meta=self.meta,
        ).validate()
        self.report = report
        if self.out_dir is not None:
            (self.out_dir / "report.json").write_text(report.to_json())
            (self.out_dir / "loss_curves.csv").write_text(loss_curves_csv(report))
            if self.genotype is not None:
                (self.out_dir / "genotype.json").write_text(serialize(self.genotype))
        return report


def run_dass(config: SearchConfig, data: DataSplit | None = None,
             out_dir: str | Path | None = None) -> SearchRun:
    """Full pipeline; returns the completed run (report, genotype, final network)."""
    run = SearchRun(config, data=data, method="dass", out_dir=out_dir)
    run.run()
    return run


def run_darts_sparse_baseline(config: SearchConfig, data: DataSplit | None = None,
                              out_dir: str | Path | None = None) -> SearchRun:
    """Dense search, derive, then prune and fine-tune as post-processing."""
    run = SearchRun(config, data=data, method="baseline", out_dir=out_dir)
    run.run()
    return run

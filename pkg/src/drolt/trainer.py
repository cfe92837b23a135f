"""Three-stage training: cross-entropy warmup, joint CE + robust loss, balanced classifier re-training."""

from dataclasses import dataclass, field
import csv
import io
import json
import math
import os

import numpy as np

from drolt import centroids, data, epsilon, evaluation, kernels, losses
from drolt.config import resolve
from drolt.model import Network, freeze_backbone, load_checkpoint, save_checkpoint, unfreeze

METRIC_COLUMNS = [
    "epoch", "stage", "loss_total", "loss_ce", "loss_robust",
    "acc_many", "acc_med", "acc_few", "acc_balanced",
    "gap_ratio", "eps_min", "eps_median", "eps_max",
]
REPORT_SCHEMA_ID = "drolt.run_report/1"


class TrainingDiverged(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


@dataclass
class TrainPlan:
    warmup_epochs: int = 20
    joint_epochs: int = 20
    rebalance_epochs: int = 10
    lam: float = 0.5
    lr: float = 0.05
    milestones: list = field(default_factory=lambda: [30])
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    rebalance_lr: float = 0.01
    patience: int = 0
    weight_mode: str = "inverse_count"
    eps_lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.warmup_epochs, self.joint_epochs, self.rebalance_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")

    @classmethod
    def from_config(cls, cfg):
        return cls(
            warmup_epochs=cfg["train.warmup_epochs"],
            joint_epochs=cfg["train.joint_epochs"] if cfg["run.stage"] == "all" else 0,
            rebalance_epochs=cfg["train.rebalance_epochs"] if cfg["run.stage"] == "all" else 0,
            lam=float(cfg["train.lambda"]),
            lr=float(cfg["train.lr"]),
            milestones=list(cfg["train.milestones"]),
            gamma=float(cfg["train.gamma"]),
            momentum=float(cfg["train.momentum"]),
            weight_decay=float(cfg["train.weight_decay"]),
            batch_size=cfg["train.batch_size"],
            rebalance_lr=float(cfg["train.rebalance_lr"]),
            patience=cfg["train.patience"],
            weight_mode=cfg["train.weight_mode"],
            eps_lr=float(cfg["epsilon.lr"]),
            seed=cfg["train.seed"],
        )

    def lr_at(self, epoch):
        return self.lr * self.gamma ** sum(1 for m in self.milestones if m <= epoch)

    def schedule(self):
        return ["warmup"] * self.warmup_epochs + ["joint"] * self.joint_epochs + ["rebalance"] * self.rebalance_epochs


class Trainer:
    """Holds the mutable training state shared by the three stages."""

    def __init__(self, net, dataset, plan, policy=None):
        self.net = net
        self.dataset = dataset
        self.plan = plan
        self.policy = policy if policy is not None else epsilon.shared(0.0, dataset.class_counts)
        self.rng = np.random.default_rng(plan.seed)
        self.bank = None
        self.epoch = 0
        self.history = []
        self.head_trained = False
        self.best = None
        self.stale = 0
        self.stopped_early = False
        self.batch_hook = None
        self.splits = data.assign_splits(dataset.class_counts)

    def refresh_bank(self):
        z = self.net.embed(self.dataset.x_train)[-1]
        self.bank = centroids.recompute(z, self.dataset.y_train, self.dataset.n_classes, self.epoch)
        return self.bank

    def _shuffled_batches(self):
        n = len(self.dataset.y_train)
        order = self.rng.permutation(n)
        bs = self.plan.batch_size
        return [order[i:i + bs] for i in range(0, n, bs) if len(order[i:i + bs]) >= 2]

    def _check(self, batch_id, value, *grads):
        finite = math.isfinite(value) and all(g is None or np.all(np.isfinite(g)) for g in grads)
        if not finite:
            finite_parts = [np.abs(g[np.isfinite(g)]) for g in grads if g is not None]
            max_grad = max((float(a.max()) for a in finite_parts if a.size), default=float("nan"))
            raise TrainingDiverged(
                f"non-finite loss at epoch {self.epoch}, batch {batch_id}: value={value}, "
                f"eps={self.policy.values().tolist()}, max|grad|={max_grad}"
            )

    def _step(self, idx, batch_id, lam, lr):
        """One minibatch step on ``lam * CE + (1 - lam) * robust``."""
        x = self.dataset.x_train[idx]
        y = self.dataset.y_train[idx]
        _, z, logits = self.net.forward(x)
        ce = losses.cross_entropy(logits, y)
        batch = losses.make_batch(z, y, self.dataset.class_counts, self.plan.weight_mode)
        robust = losses.robust_loss(batch, self.bank, self.policy)
        total = losses.joint_loss(ce, robust, lam)
        self._check(batch_id, total.value, total.grad_embeddings, total.grad_logits, total.grad_epsilon)
        if self.batch_hook is not None:
            self.batch_hook(self, batch_id)
        grad_z = total.grad_embeddings if lam < 1.0 else None
        grads = self.net.backward(grad_z=grad_z, grad_logits=total.grad_logits)
        self.net.sgd_step(grads, lr, self.plan.momentum, self.plan.weight_decay)
        if self.policy.learned and lam < 1.0:
            self.policy = epsilon.update_learned_epsilon(self.policy, total.grad_epsilon, self.plan.eps_lr)
        return total.value, ce.value, robust.value

    def _train_epoch(self, stage, lam):
        self.refresh_bank()
        lr = self.plan.lr_at(self.epoch)
        sums = np.zeros(3)
        batches = self._shuffled_batches()
        for b, idx in enumerate(batches):
            sums += self._step(idx, b, lam, lr)
        self.head_trained = True
        return sums / max(len(batches), 1)

    def warmup_epoch(self):
        return self._finish_epoch("warmup", self._train_epoch("warmup", 1.0))

    def joint_epoch(self):
        if self.bank is None:
            raise StageOrderError("stage 2 needs a centroid bank; run the warmup stage first")
        return self._finish_epoch("joint", self._train_epoch("joint", self.plan.lam))

    def rebalance_epoch(self):
        if not self.head_trained:
            raise StageOrderError("stage 3 needs a trained classifier head")
        if not self.net.frozen:
            freeze_backbone(self.net)
            self.net.reset_velocity(self.net.classifier_keys)
        n = len(self.dataset.y_train)
        n_batches = max(1, math.ceil(n / self.plan.batch_size))
        sums = np.zeros(3)
        for b, idx in enumerate(data.balanced_batches(self.dataset.y_train, self.plan.batch_size, n_batches, self.rng)):
            _, _, logits = self.net.forward(self.dataset.x_train[idx])
            ce = losses.cross_entropy(logits, self.dataset.y_train[idx])
            self._check(b, ce.value, ce.grad_logits)
            grads = self.net.backward(grad_logits=ce.grad_logits)
            self.net.sgd_step(grads, self.plan.rebalance_lr, self.plan.momentum, self.plan.weight_decay)
            sums += (ce.value, ce.value, float("nan"))
        return self._finish_epoch("rebalance", sums / n_batches)

    def _finish_epoch(self, stage, means):
        self.epoch += 1
        acc = evaluation.evaluate(self.net, self.dataset, "test")
        eps = self.policy.values()
        row = {
            "epoch": self.epoch, "stage": stage,
            "loss_total": float(means[0]), "loss_ce": float(means[1]),
            "loss_robust": None if math.isnan(means[2]) else float(means[2]),
            "acc_many": acc.many, "acc_med": acc.med, "acc_few": acc.few, "acc_balanced": acc.balanced,
            "gap_ratio": self.gap_ratio(),
            "eps_min": float(eps.min()), "eps_median": float(np.median(eps)), "eps_max": float(eps.max()),
        }
        self.history.append(row)
        return row

    def gap_ratio(self):
        if self.bank is None:
            return None
        z = self.net.embed(self.dataset.x_train)[-1]
        batch = losses.make_batch(z, self.dataset.y_train, self.dataset.class_counts, self.plan.weight_mode)
        try:
            return losses.bound_gap_ratio(batch, self.bank, self.policy)
        except ValueError:
            return None

    def track_validation(self):
        """Early-stopping bookkeeping after a joint epoch; True when patience is exhausted."""
        if self.plan.patience <= 0:
            return False
        score = evaluation.evaluate(self.net, self.dataset, "val").balanced
        if self.best is None or score > self.best["score"]:
            self.best = {"score": score, "epoch": self.epoch,
                         "params": {k: v.copy() for k, v in self.net.params.items()},
                         "eps": None if not self.policy.learned else self.policy.per_class_param.copy()}
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.plan.patience

    def restore_best(self):
        if self.best is None:
            return
        self.net.params = {k: v.copy() for k, v in self.best["params"].items()}
        self.net.reset_velocity()
        if self.best["eps"] is not None:
            self.policy = epsilon.EpsilonPolicy("learned", self.policy.class_counts,
                                                per_class_param=self.best["eps"].copy())


def stage1_warmup(net, dataset, plan, trainer=None):
    """Cross-entropy training; the centroid bank is refreshed every epoch (and once if there are none)."""
    t = trainer or Trainer(net, dataset, plan)
    for _ in range(plan.warmup_epochs):
        t.warmup_epoch()
    if plan.warmup_epochs == 0 and t.bank is None:
        t.refresh_bank()
    t.head_trained = True
    return t.net


def stage2_joint(net, dataset, plan, eps_policy, trainer):
    """Joint training with the robust loss; needs the bank left by :func:`stage1_warmup`."""
    if trainer is None or trainer.bank is None:
        raise StageOrderError("stage 2 needs a centroid bank; run the warmup stage first")
    trainer.policy = eps_policy if eps_policy is not None else trainer.policy
    for _ in range(plan.joint_epochs):
        trainer.joint_epoch()
        if trainer.track_validation():
            trainer.stopped_early = True
            trainer.restore_best()
            break
    return trainer.net


def stage3_rebalance(net, dataset, plan, trainer):
    """Freeze the backbone and retrain the classifier on class-balanced batches."""
    if trainer is None or not trainer.head_trained:
        raise StageOrderError("stage 3 needs a trained classifier head")
    for _ in range(plan.rebalance_epochs):
        trainer.rebalance_epoch()
    return trainer.net


# --------------------------------------------------------------------------- runs


def build_dataset(cfg):
    if cfg["data.path"]:
        return data.load(cfg["data.path"])
    return data.synthesize(
        cfg["data.classes"], cfg["data.n_max"], cfg["data.beta"], cfg["data.dim"],
        spread=cfg["data.spread"], seed=cfg["data.seed"], separation=cfg["data.separation"],
        test_per_class=cfg["data.test_per_class"], val_per_class=cfg["data.val_per_class"],
    )


def build_network(cfg, dataset):
    return Network(dataset.dim, cfg["model.widths"], cfg["model.embedding_dim"], dataset.n_classes,
                   activation=cfg["model.activation"], seed=cfg["train.seed"])


def build_policy(cfg, dataset):
    return epsilon.make_policy(cfg["epsilon.variant"], cfg["epsilon.value"], dataset.class_counts,
                               init=cfg["epsilon.init"])


def metrics_csv(history):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: evaluation._cell(row[k]) for k in METRIC_COLUMNS})
    return buf.getvalue()


def _save_state(path, trainer, cfg):
    extra = {"eps_param": trainer.policy.per_class_param if trainer.policy.learned else np.zeros(0)}
    if trainer.bank is not None:
        extra.update(bank_centroids=trainer.bank.centroids, bank_counts=trainer.bank.counts,
                     bank_spreads=trainer.bank.spreads)
    if trainer.best is not None:
        extra.update({f"best_{k}": v for k, v in trainer.best["params"].items()})
        if trainer.best["eps"] is not None:
            extra["best_eps"] = trainer.best["eps"]
    meta = {
        "config": cfg,
        "epoch": trainer.epoch,
        "rng": trainer.rng.bit_generator.state,
        "history": trainer.history,
        "head_trained": trainer.head_trained,
        "bank_epoch": None if trainer.bank is None else trainer.bank.epoch,
        "best": None if trainer.best is None else {"score": trainer.best["score"], "epoch": trainer.best["epoch"]},
        "stale": trainer.stale,
        "stopped_early": trainer.stopped_early,
    }
    save_checkpoint(path, trainer.net, extra, meta)


def _restore_state(path, dataset, plan, policy):
    net, extra, meta = load_checkpoint(path)
    t = Trainer(net, dataset, plan, policy)
    if policy.learned:
        t.policy = epsilon.EpsilonPolicy("learned", policy.class_counts, per_class_param=extra["eps_param"].copy())
    t.epoch = meta["epoch"]
    t.rng.bit_generator.state = meta["rng"]
    t.history = meta["history"]
    t.head_trained = meta["head_trained"]
    if meta["bank_epoch"] is not None:
        t.bank = centroids.CentroidBank(centroids._frozen(extra["bank_centroids"]), centroids._frozen(extra["bank_counts"]),
                                        centroids._frozen(extra["bank_spreads"]), meta["bank_epoch"])
    if meta["best"] is not None:
        t.best = dict(meta["best"])
        t.best["params"] = {k[len("best_"):]: v.copy() for k, v in extra.items()
                            if k.startswith("best_") and k != "best_eps"}
        t.best["eps"] = extra["best_eps"].copy() if "best_eps" in extra else None
    t.stale = meta["stale"]
    t.stopped_early = meta["stopped_early"]
    return t


def run(cfg, out_dir=None, resume=None, stop_after=None):
    """Execute stages 1-3 for a config; returns the run report.

    With ``out_dir`` the metrics CSV, report JSON and checkpoints are written
    there.  ``resume`` continues from a checkpoint written by an earlier run
    of the same config; ``stop_after`` halts after that many total epochs.
    """
    cfg = resolve(cfg)
    dataset = build_dataset(cfg)
    plan = TrainPlan.from_config(cfg)
    policy = build_policy(cfg, dataset)
    if resume is not None:
        trainer = _restore_state(resume, dataset, plan, policy)
    else:
        trainer = Trainer(build_network(cfg, dataset), dataset, plan, policy)
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

    schedule = plan.schedule()
    every = cfg["run.checkpoint_every"]
    snapshot_before_rebalance = None
    if trainer.epoch == 0 and plan.warmup_epochs == 0:
        trainer.refresh_bank()
        trainer.head_trained = True
    while trainer.epoch < len(schedule):
        if stop_after is not None and trainer.epoch >= stop_after:
            break
        stage = schedule[trainer.epoch]
        if stage == "joint" and trainer.stopped_early:
            trainer.epoch += 1
            continue
        if stage == "warmup":
            trainer.warmup_epoch()
        elif stage == "joint":
            trainer.joint_epoch()
            if trainer.track_validation():
                trainer.stopped_early = True
                trainer.restore_best()
        else:
            trainer.rebalance_epoch()
        if out_dir is not None and every and trainer.epoch % every == 0:
            _save_state(os.path.join(out_dir, "checkpoints", f"epoch_{trainer.epoch:04d}.npz"), trainer, cfg)

    finished = trainer.epoch >= len(schedule)
    report = make_report(cfg, trainer, finished)
    if out_dir is not None:
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            fh.write(metrics_csv(trainer.history))
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _save_state(os.path.join(out_dir, "checkpoint.npz"), trainer, cfg)
    report["_trainer"] = trainer
    return report


def _stage_accuracy(history, stage):
    rows = [r for r in history if r["stage"] == stage]
    if not rows:
        return None
    r = rows[-1]
    return {"many": r["acc_many"], "med": r["acc_med"], "few": r["acc_few"], "balanced": r["acc_balanced"]}


def make_report(cfg, trainer, finished=True):
    ds = trainer.dataset
    final = evaluation.evaluate(trainer.net, ds, "test")
    val = evaluation.evaluate(trainer.net, ds, "val")
    eps_rows, rho = evaluation.epsilon_report(trainer.policy, ds.class_counts)
    return {
        "schema": REPORT_SCHEMA_ID,
        "config": cfg,
        "seed": {"data": cfg["data.seed"], "train": cfg["train.seed"]},
        "kernel_backend": kernels.BACKEND,
        "finished": finished,
        "epochs_run": trainer.epoch,
        "stopped_early": trainer.stopped_early,
        "dataset": {"class_counts": [int(n) for n in ds.class_counts], "beta": ds.beta,
                    "splits": trainer.splits},
        "test": final.as_dict(),
        "val": val.as_dict(),
        "after_warmup": _stage_accuracy(trainer.history, "warmup"),
        "after_joint": _stage_accuracy(trainer.history, "joint"),
        "epsilon": {"variant": trainer.policy.variant, "values": [r["epsilon"] for r in eps_rows],
                    "spearman_count": rho},
        "gap_ratio": trainer.gap_ratio(),
    }


# JSON schema of report.json (also reproduced in docs/formats.md).
_ACC = {"type": ["object", "null"], "required": ["many", "med", "few", "balanced"],
        "properties": {k: {"type": ["number", "null"]} for k in ("many", "med", "few", "balanced")}}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "config", "seed", "kernel_backend", "finished", "epochs_run", "stopped_early",
                 "dataset", "test", "val", "after_warmup", "after_joint", "epsilon", "gap_ratio"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_ID},
        "config": {"type": "object", "required": ["schema_version"]},
        "seed": {"type": "object", "required": ["data", "train"]},
        "kernel_backend": {"enum": ["python", "cython"]},
        "finished": {"type": "boolean"},
        "epochs_run": {"type": "integer", "minimum": 0},
        "stopped_early": {"type": "boolean"},
        "dataset": {"type": "object", "required": ["class_counts", "beta", "splits"]},
        "test": _ACC, "val": _ACC, "after_warmup": _ACC, "after_joint": _ACC,
        "epsilon": {"type": "object", "required": ["variant", "values", "spearman_count"],
                    "properties": {"values": {"type": "array", "items": {"type": "number", "minimum": 0}},
                                   "spearman_count": {"type": ["number", "null"]}}},
        "gap_ratio": {"type": ["number", "null"], "minimum": 0},
    },
}

"""Training loop for the domain-adaptation localizer, plus evaluation
metrics and the ablation driver.

Scenes are split into labeled source scenes, validation scenes and
unlabeled target scenes.  Every step draws one source and one target
mini-batch; target labels are never shown to the optimizer (an
instrumented assertion enforces it) and are only read at final
reporting time.  The alignment weight follows the sigmoid ramp
lambda3(kappa) = 2 / (1 + exp(-10 kappa)) - 1 over training progress.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, asdict

import numpy as np

from . import features as feat
from . import losses
from .engine import SGD
from .models import ArchConfig, Model
from .scenario import Dataset

METHODS = ("dcnn", "pcp-only", "mda-unweighted", "mda", "hda")


@dataclass
class SplitPlan:
    """Disjoint scene index ranges: [0, src) labeled, [src, val) validation,
    [val, end) unlabeled target."""

    source_scenes: range
    val_scenes: range
    target_scenes: range

    @classmethod
    def default(cls, n_scenes):
        """50/20/50-style proportional split (5:2:5 of the scene axis)."""
        a = round(n_scenes * 5 / 12)
        b = round(n_scenes * 7 / 12)
        return cls(range(0, a), range(a, b), range(b, n_scenes))

    def validate(self, n_scenes):
        sets = [set(self.source_scenes), set(self.val_scenes),
                set(self.target_scenes)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("split ranges overlap")
        if any(s < 0 or s >= n_scenes for ss in sets for s in ss):
            raise ValueError("split exceeds scene range")


@dataclass
class TrainConfig:
    method: str = "mda"
    batch_size: int = 64
    epochs: int = 40
    lambda1: float | None = None   # None -> method default
    lambda2: float | None = None
    lambda3_max: float = 1.0       # scale on the sigmoid ramp; 0 disables KT
    lambda4: float = 0.05
    gamma: float = 2.0
    lr: float = 1e-3
    momentum: float = 0.99
    optimizer_weight_decay: float = 0.0  # 0 while WR is active (no double reg)
    seed: int = 0
    fingerprint: str = feat.ADP
    normalization: str = feat.AW
    conv_channels: list | None = None
    mlp_widths: list | None = None
    exact_tempered: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.batch_size < 2:
            raise ValueError("batch norm needs batch_size >= 2")
        if self.epochs < 1:
            raise ValueError("epochs >= 1")

    def main_weights(self):
        defaults = {"dcnn": (1.0, 0.0), "pcp-only": (0.0, 1.0),
                    "mda-unweighted": (0.5, 0.5), "mda": (0.7, 0.3),
                    "hda": (None, None)}
        l1, l2 = defaults[self.method]
        if self.lambda1 is not None:
            l1 = self.lambda1
        if self.lambda2 is not None:
            l2 = self.lambda2
        return l1, l2

    def uses_kt(self):
        return self.lambda3_max > 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class Metrics:
    rmse: float
    accuracy: float
    errors: np.ndarray  # sorted per-sample Euclidean errors
    quantiles: dict

    def summary(self):
        return {"rmse": self.rmse, "accuracy": self.accuracy,
                **{f"q{int(q * 100)}": v for q, v in self.quantiles.items()}}


def lambda3_schedule(kappa):
    """Monotone ramp in [0, 1): 0 at kappa=0, ~0.9999 at kappa=1."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return 2.0 / (1.0 + np.exp(-10.0 * kappa)) - 1.0


# ----------------------------------------------------------------------
# data plumbing
# ----------------------------------------------------------------------

@dataclass
class DomainData:
    inputs: np.ndarray   # [n, C, H, W] float64
    coords: np.ndarray   # [n, 3]
    labels: np.ndarray   # [n]
    is_source: bool


def prepare_domains(ds, split, cfg):
    """Fingerprint extraction + normalization, split by scene index."""
    scenario = None
    from .dataio import scenario_from_manifest
    scenario = scenario_from_manifest(ds.manifest)
    fps = feat.fingerprint_pipeline(ds.cfr, cfg.fingerprint,
                                    cfg.normalization, scenario.array)
    if fps.ndim == 3:  # single-plane fingerprints get a channel axis
        fps = fps[:, None, :, :]
    split.validate(ds.manifest["n_scenes"])

    def pick(scene_range, is_source):
        mask = np.isin(ds.scene_ids, list(scene_range))
        return DomainData(inputs=fps[mask], coords=ds.coords[mask],
                          labels=ds.labels[mask], is_source=is_source)

    return (pick(split.source_scenes, True),
            pick(split.val_scenes, False),
            pick(split.target_scenes, False))


def arch_for(cfg, input_shape, n_classes=3):
    conv = cfg.conv_channels or [16, 32, 32, 64]
    mlp = cfg.mlp_widths or [256, 128]
    return ArchConfig(conv_channels=list(conv),
                      mlp_widths_reg=list(mlp) + [3],
                      mlp_widths_cls=list(mlp) + [n_classes],
                      n_classes=n_classes,
                      input_kind=cfg.fingerprint,
                      input_shape=tuple(input_shape))


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    best_state: dict
    best_epoch: int
    best_val_score: float
    log_csv: str
    uncertainty: losses.UncertaintyParams | None


def _supervised_batch(domain, idx):
    """The only gateway to labels used in gradients; source-only by design."""
    assert domain.is_source, "labels of non-source data must never reach a loss"
    return domain.inputs[idx], domain.coords[idx], domain.labels[idx]


def train(dataset, split, cfg):
    """Train per the configured method; returns the best-val-RMSE checkpoint."""
    source, val, target = prepare_domains(dataset, split, cfg)
    if len(source.inputs) == 0 or len(val.inputs) == 0:
        raise ValueError("empty source or validation split")

    input_shape = source.inputs.shape[1:]
    arch = arch_for(cfg, input_shape)
    model = Model(arch, seed=cfg.seed)
    params = dict(model.params)

    u = None
    if cfg.method == "hda":
        u = losses.UncertaintyParams()
        params.update(u.as_params())

    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.optimizer_weight_decay,
              no_momentum=("hda.",))
    rng = np.random.default_rng([cfg.seed, 101])
    lam1, lam2 = cfg.main_weights()
    if cfg.method != "hda":
        weights = losses.LossWeights(cr=lam1, pcp=lam2, kt=1.0,
                                     wr=cfg.lambda4, gamma=cfg.gamma)

    n_src = len(source.inputs)
    steps_per_epoch = max(1, n_src // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    log = io.StringIO()
    log.write("step,L_CR,L_PCP,L_loc,L_global,L_WR,w1,w2,lambda3,lambda4,total\n")
    best_state, best_epoch, best_val = None, -1, np.inf
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_src)
        for s in range(steps_per_epoch):
            src_idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            tgt_idx = rng.integers(0, len(target.inputs), size=len(src_idx))
            lam3 = cfg.lambda3_max * lambda3_schedule(step / total_steps)

            x_s, y_s, d_s = _supervised_batch(source, src_idx)
            out_s = model.forward(x_s, train=True)
            out_t = None
            if lam3 > 0.0:
                out_t = model.forward(target.inputs[tgt_idx], train=True)

            if cfg.method == "hda":
                total, report = losses.hda_total(
                    out_s, y_s, d_s, out_t, model.params, u,
                    lam3=lam3, lam4=cfg.lambda4, gamma=cfg.gamma,
                    exact_tempered=cfg.exact_tempered)
            else:
                total, report = losses.mda_total(
                    out_s, y_s, d_s, out_t, model.params, weights,
                    kt_weight=lam3)

            opt.zero_grad()
            total.backward()
            opt.step()
            w = report.weights
            w1 = w.get("lambda1", w.get("sigma1_sq"))
            w2 = w.get("lambda2", w.get("sigma2_sq"))
            log.write(f"{step},{report.cr:.10g},{report.pcp:.10g},"
                      f"{report.kt_local:.10g},{report.kt_global:.10g},"
                      f"{report.wr:.10g},{w1:.10g},{w2:.10g},"
                      f"{lam3:.10g},{cfg.lambda4:.10g},{report.total:.10g}\n")
            step += 1

        m = evaluate_arrays(model, val)
        log.write(f"epoch,{epoch},val_rmse,{m.rmse:.10g},"
                  f"val_acc,{m.accuracy:.10g}\n")
        # pcp-only trains no useful regressor; select on accuracy instead
        score = -m.accuracy if cfg.method == "pcp-only" else m.rmse
        if score < best_val:
            best_val, best_epoch = score, epoch
            best_state = model.state_dict()

    # pcp-only's score is negated accuracy; everything else is val RMSE
    return TrainResult(model=model, best_state=best_state,
                       best_epoch=best_epoch, best_val_score=best_val,
                       log_csv=log.getvalue(), uncertainty=u)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

def evaluate_arrays(model, domain, batch_size=256):
    """Eval-mode metrics on one prepared domain."""
    n = len(domain.inputs)
    preds, classes = [], []
    for lo in range(0, n, batch_size):
        out = model.forward(domain.inputs[lo:lo + batch_size], train=False)
        preds.append(out.coords.data)
        classes.append(out.probs.data.argmax(axis=1))
    pred = np.concatenate(preds)
    cls = np.concatenate(classes)
    errors = np.linalg.norm(pred - domain.coords, axis=1)
    rmse = float(np.sqrt(np.mean(errors ** 2)))
    acc = float(np.mean(cls == domain.labels))
    sorted_err = np.sort(errors)
    quantiles = {q: float(np.quantile(errors, q)) for q in (0.5, 0.67, 0.9, 0.95)}
    return Metrics(rmse=rmse, accuracy=acc, errors=sorted_err,
                   quantiles=quantiles)


def evaluate(model, dataset, split, cfg, which="target"):
    source, val, target = prepare_domains(dataset, split, cfg)
    domain = {"source": source, "val": val, "target": target}[which]
    return evaluate_arrays(model, domain)


# ----------------------------------------------------------------------
# ablation
# ----------------------------------------------------------------------

DEFAULT_ABLATION = (
    ("cr-only", dict(method="dcnn", lambda3_max=0.0)),
    ("cr-only+kt", dict(method="dcnn")),
    ("pcp-only", dict(method="pcp-only", lambda3_max=0.0)),
    ("pcp-only+kt", dict(method="pcp-only")),
    ("unweighted", dict(method="mda-unweighted")),
    ("mda", dict(method="mda")),
    ("hda", dict(method="hda")),
)


def run_ablation(dataset, split, base_cfg, grid=DEFAULT_ABLATION, seeds=(0, 1, 2)):
    """Train each grid row over several seeds; report mean +/- std and the
    relative gain of each row against the matching single-task baseline."""
    rows = []
    for name, overrides in grid:
        rmses, accs = [], []
        for seed in seeds:
            cfg = TrainConfig(**{**base_cfg.to_dict(), **overrides,
                                 "seed": seed})
            result = train(dataset, split, cfg)
            result.model.load_state_dict(result.best_state)
            m = evaluate(result.model, dataset, split, cfg, which="target")
            rmses.append(m.rmse)
            accs.append(m.accuracy)
        rows.append({"name": name,
                     "rmse_mean": float(np.mean(rmses)),
                     "rmse_std": float(np.std(rmses)),
                     "acc_mean": float(np.mean(accs)),
                     "acc_std": float(np.std(accs))})

    base_rmse = next((r["rmse_mean"] for r in rows if r["name"] == "cr-only"), None)
    base_acc = next((r["acc_mean"] for r in rows if r["name"] == "pcp-only"), None)
    for r in rows:
        loc_gain = ""
        acc_gain = ""
        if base_rmse and r["name"] != "cr-only" and r["rmse_mean"] > 0 \
                and not r["name"].startswith("pcp-only"):
            loc_gain = f"{100.0 * (base_rmse - r['rmse_mean']) / base_rmse:.3f}"
        if base_acc and r["name"] != "pcp-only" and r["acc_mean"] > 0 \
                and not r["name"].startswith("cr-only"):
            acc_gain = f"{100.0 * (r['acc_mean'] - base_acc) / base_acc:.3f}"
        r["loc_gain_pct"] = loc_gain
        r["acc_gain_pct"] = acc_gain
    return rows


def ablation_csv(rows):
    cols = ["name", "rmse_mean", "rmse_std", "acc_mean", "acc_std",
            "loc_gain_pct", "acc_gain_pct"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(
            f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c])
            for c in cols))
    return "\n".join(lines) + "\n"

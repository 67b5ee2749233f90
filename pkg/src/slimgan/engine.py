"""End-to-end compression pipeline.

Three phases over a split dataset: pretrain the supernet weights under the
sandwich rule (widest, narrowest, two random width configurations per batch),
then alternate weight updates (first half of the data) with architecture
updates (second half) where the architecture gradient adds the budget
penalty, and finally derive the argmax architecture and train it from scratch
against the teacher. A doubling/halving controller retunes the budget
trade-off once per epoch from the derived architecture's exact cost.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import torch

from .budget import (
    BudgetConfig,
    LambdaController,
    budget_term,
    derived_flops,
    op_flops,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .distill import DistillConfig, build_extractor, distance, distance_components
from .metrics import MetricsLog
from .schema import export_architecture, import_architecture
from .search_space import (
    Architecture,
    ArchLayer,
    OperatorKind,
    SupernetSpec,
    build_sr_supernet,
    build_translation_supernet,
    max_architecture,
    op_name,
    spec_for_architecture,
    with_provenance,
)
from .supernet import (
    ArchParams,
    DerivedGenerator,
    GeneratorSupernet,
    extract_student_weights,
)
from .toy import TeacherModel, make_toy_task


class PhaseError(RuntimeError):
    """A phase failed; carries the phase name and epoch."""

    def __init__(self, phase: str, epoch: int, cause: BaseException):
        super().__init__(f"phase {phase!r} failed at epoch {epoch}: {cause}")
        self.phase = phase
        self.epoch = epoch
        self.cause = cause


@dataclass(frozen=True)
class DatasetSplit:
    chi1: tuple[int, ...]
    chi2: tuple[int, ...]


def split_dataset(n: int, seed: int) -> DatasetSplit:
    """Deterministic shuffled halving; the halves differ in size by at most 1."""
    if n < 2:
        raise ValueError("need at least two samples to split")
    generator = torch.Generator().manual_seed(seed)
    perm = torch.randperm(n, generator=generator).tolist()
    k = (n + 1) // 2
    return DatasetSplit(chi1=tuple(perm[:k]), chi2=tuple(perm[k:]))


def _batches(indices: tuple[int, ...], batch_size: int, generator: torch.Generator):
    order = torch.randperm(len(indices), generator=generator).tolist()
    shuffled = [indices[i] for i in order]
    for start in range(0, len(shuffled), batch_size):
        yield tuple(shuffled[start : start + batch_size])


@dataclass
class SearchState:
    config: RunConfig
    spec: SupernetSpec
    supernet: GeneratorSupernet
    arch_params: ArchParams
    teacher: TeacherModel
    extractor: torch.nn.Module
    distill_cfg: DistillConfig
    budget_cfg: BudgetConfig
    lambda_ctl: LambdaController
    images: torch.Tensor
    split: DatasetSplit
    w_optimizer: torch.optim.Optimizer
    w_scheduler: object
    arch_optimizer: torch.optim.Optimizer
    width_generator: torch.Generator
    batch_generator: torch.Generator
    phase: str = "pretrain"
    epoch: int = 0
    temperature: float = 1.0
    w_batch_log: list = field(default_factory=list)
    arch_batch_log: list = field(default_factory=list)

    def alpha_hash(self) -> int:
        return hash(tuple(p.detach().numpy().tobytes() for p in self.arch_params.alpha.values()))

    def gamma_hash(self) -> int:
        return hash(tuple(p.detach().numpy().tobytes() for p in self.arch_params.gamma.values()))


def build_spec(cfg: RunConfig) -> SupernetSpec:
    if cfg.task == "translation":
        return build_translation_supernet(cfg.max_width, body_layers=cfg.body_layers)
    return build_sr_supernet(cfg.max_width, rir_groups=cfg.rir_groups, group_layers=cfg.group_layers)


def load_run_dataset(cfg: RunConfig) -> tuple[torch.Tensor, TeacherModel]:
    """The training images and the frozen teacher for a run."""
    if cfg.dataset_kind == "toy":
        task = make_toy_task(cfg.toy_kind, cfg.seed, size=cfg.dataset_size, image_size=cfg.image_size)
        return task.images, task.teacher
    if cfg.dataset_kind == "tensor_file":
        tensors, _ = load_checkpoint(cfg.dataset_path)
        if "images" not in tensors:
            raise ValueError(f"{cfg.dataset_path}: container has no 'images' tensor")
        images = tensors["images"].float()
    else:
        images = _load_image_folder(cfg.dataset_path)
    teacher = load_teacher(cfg.teacher_arch, cfg.teacher_weights)
    return images, teacher


def load_teacher(arch_path: str, weights_path: str) -> TeacherModel:
    with open(arch_path) as handle:
        arch = import_architecture(handle.read())
    spec = spec_for_architecture(arch)
    net = GeneratorSupernet(spec)
    tensors, _ = load_checkpoint(weights_path)
    from .supernet import load_student_weights

    load_student_weights(net, arch, tensors)
    return TeacherModel(DerivedGenerator(net, arch), spec, arch)


def _load_image_folder(path: str) -> torch.Tensor:
    try:
        from PIL import Image
    except ImportError as exc:
        raise RuntimeError("image-folder datasets need pillow installed") from exc
    import numpy as np

    files = sorted(
        f for f in os.listdir(path) if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))
    )
    if not files:
        raise ValueError(f"no images under {path}")
    arrays = []
    for name in files:
        with Image.open(os.path.join(path, name)) as img:
            arrays.append(np.asarray(img.convert("RGB"), dtype=np.float32))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"images under {path} have mixed sizes: {sorted(shapes)}")
    stack = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2)
    return stack / 127.5 - 1.0


def build_state(cfg: RunConfig) -> SearchState:
    torch.manual_seed(cfg.seed)
    spec = build_spec(cfg)
    supernet = GeneratorSupernet(spec)
    arch_params = ArchParams(spec)
    images, teacher = load_run_dataset(cfg)
    distill_cfg = cfg.distill_config()
    extractor = build_extractor(distill_cfg.extractor, in_channels=spec.input_channels)
    max_cost = derived_flops(spec, max_architecture(spec), cfg.eval_height, cfg.eval_width).total
    budget_cfg = cfg.budget_config(max_arch_flops=max_cost)
    split = split_dataset(images.size(0), cfg.seed)
    total_w_epochs = cfg.pretrain_epochs + cfg.search_epochs
    w_optimizer, w_scheduler = _weight_optimizer(
        cfg, supernet.parameters(), total_w_epochs, cfg.w_lr, cfg.w_decay_start, cfg.w_milestones
    )
    arch_optimizer = torch.optim.Adam(arch_params.parameters(), lr=cfg.arch_lr)
    return SearchState(
        config=cfg,
        spec=spec,
        supernet=supernet,
        arch_params=arch_params,
        teacher=teacher,
        extractor=extractor,
        distill_cfg=distill_cfg,
        budget_cfg=budget_cfg,
        lambda_ctl=LambdaController(budget_cfg),
        images=images,
        split=split,
        w_optimizer=w_optimizer,
        w_scheduler=w_scheduler,
        arch_optimizer=arch_optimizer,
        width_generator=torch.Generator().manual_seed(cfg.seed + 101),
        batch_generator=torch.Generator().manual_seed(cfg.seed + 202),
        temperature=cfg.temperature,
    )


def _weight_optimizer(cfg, params, total_epochs, lr, decay_start, milestones):
    params = list(params)
    if cfg.w_optimizer == "sgd":
        optimizer = torch.optim.SGD(params, lr=lr, momentum=cfg.w_momentum)
    else:
        optimizer = torch.optim.Adam(params, lr=lr)
    if cfg.task == "translation":
        # constant for decay_start epochs, then linear to zero
        def factor(epoch: int) -> float:
            if epoch <= decay_start or total_epochs <= decay_start:
                return 1.0
            return max(0.0, 1.0 - (epoch - decay_start) / (total_epochs - decay_start))

        scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
    else:
        scheduler = torch.optim.lr_scheduler.MultiStepLR(
            optimizer, milestones=list(milestones), gamma=0.5
        )
    return optimizer, scheduler


def _random_width_override(spec: SupernetSpec, generator: torch.Generator) -> dict[str, int]:
    return {
        layer.id: int(torch.randint(len(layer.width_candidates()), (1,), generator=generator))
        for layer in spec.searchable_width_layers()
    }


SANDWICH_CONFIGS = ("max", "min", "random", "random")


def pretrain_step(state: SearchState, batch: torch.Tensor, batch_indices=()) -> list[float]:
    """Four weight updates on one batch: widest, narrowest, two random widths.

    Operator mixing stays active with the operator logits treated as
    constants; architecture parameters receive no update.
    """
    if state.phase != "pretrain":
        raise PhaseError(state.phase, state.epoch, RuntimeError("pretrain_step outside pretrain"))
    alpha_const = state.arch_params.alpha_dict(detach=True)
    target = state.teacher(batch)
    losses = []
    for name in SANDWICH_CONFIGS:
        override = name if name in ("max", "min") else _random_width_override(
            state.spec, state.width_generator
        )
        out = state.supernet(batch, alpha=alpha_const, width_override=override)
        loss = distance(out, target, state.distill_cfg, state.extractor)
        state.w_optimizer.zero_grad()
        loss.backward()
        state.w_optimizer.step()
        losses.append(loss.item())
    state.w_batch_log.append(tuple(batch_indices))
    return losses


def search_step(
    state: SearchState, batch1: torch.Tensor, batch2: torch.Tensor, indices=((), ())
) -> tuple[float, float]:
    """One weight update on chi1 data, then one architecture update on chi2 data.

    The architecture loss is the distillation distance plus the budget
    penalty; by construction the operator term only moves the operator logits
    and the width term only moves the width logits.
    """
    if state.phase != "search":
        raise PhaseError(state.phase, state.epoch, RuntimeError("search_step outside search"))
    w_params = [p for p in state.supernet.parameters() if p.requires_grad]
    arch_params = list(state.arch_params.parameters())

    out = state.supernet(
        batch1,
        alpha=state.arch_params.alpha_dict(detach=True),
        gamma=state.arch_params.gamma_dict(detach=True),
        generator=state.width_generator,
        temperature=state.temperature,
    )
    loss_w = distance(out, state.teacher(batch1), state.distill_cfg, state.extractor)
    state.w_optimizer.zero_grad()
    loss_w.backward(inputs=w_params)
    state.w_optimizer.step()

    alpha = state.arch_params.alpha_dict()
    gamma = state.arch_params.gamma_dict()
    out2 = state.supernet(
        batch2,
        alpha=alpha,
        gamma=gamma,
        generator=state.width_generator,
        temperature=state.temperature,
    )
    loss_d = distance(out2, state.teacher(batch2), state.distill_cfg, state.extractor)
    penalty = budget_term(
        state.spec,
        alpha,
        gamma,
        state.budget_cfg,
        state.lambda_ctl.value,
        state.config.eval_height,
        state.config.eval_width,
    )
    loss_arch = loss_d + penalty.to(loss_d.dtype)
    state.arch_optimizer.zero_grad()
    loss_arch.backward(inputs=arch_params)
    state.arch_optimizer.step()

    state.w_batch_log.append(tuple(indices[0]))
    state.arch_batch_log.append(tuple(indices[1]))
    return loss_w.item(), loss_d.item()


def derive(spec: SupernetSpec, alpha: dict, gamma: dict) -> Architecture:
    """Argmax operator and width per layer; ties go to the cheaper candidate."""
    widths: dict[str, int] = {}
    for layer in spec.layers:
        if layer.width is not None:
            widths[layer.id] = layer.width
        else:
            candidates = layer.width_candidates()
            logits = gamma[layer.id].detach().tolist()
            best = max(logits)
            index = min(i for i, v in enumerate(logits) if v == best)
            widths[layer.id] = candidates[index]
    layers = []
    c_in = spec.input_channels
    for layer in spec.layers:
        width = widths[layer.id]
        if layer.op_searchable:
            logits = alpha[layer.id].detach().tolist()
            best = max(logits)
            tied = [k for k, v in zip(OperatorKind, logits) if v == best]
            kind = min(tied, key=lambda k: (op_flops(k, c_in, width, 8, 8), list(OperatorKind).index(k)))
            layers.append(ArchLayer(layer.id, op_name(layer, kind), width))
        else:
            layers.append(ArchLayer(layer.id, op_name(layer), width))
        c_in = width
    return Architecture(task=spec.task, layers=tuple(layers))


def derive_state(state: SearchState) -> Architecture:
    return derive(state.spec, state.arch_params.alpha_dict(), state.arch_params.gamma_dict())


def _probe_components(state: SearchState) -> dict[str, float]:
    """Loss terms on a fixed probe batch, for the per-epoch log."""
    idx = list(state.split.chi2[: min(16, len(state.split.chi2))])
    batch = state.images[idx]
    with torch.no_grad():
        out = state.supernet(
            batch, alpha=state.arch_params.alpha_dict(detach=True), width_override="max"
        )
    return distance_components(out, state.teacher(batch), state.distill_cfg, state.extractor)


def run_pretrain(state: SearchState, log: MetricsLog | None = None) -> None:
    state.phase = "pretrain"
    cfg = state.config
    for epoch in range(1, cfg.pretrain_epochs + 1):
        state.epoch = epoch
        try:
            losses = []
            for idx in _batches(state.split.chi1, cfg.batch_size, state.batch_generator):
                losses.extend(pretrain_step(state, state.images[list(idx)], idx))
            state.w_scheduler.step()
            state.temperature *= cfg.temperature_anneal
            if log:
                log.write(
                    phase="pretrain",
                    epoch=epoch,
                    loss=sum(losses) / len(losses),
                    **_probe_components(state),
                )
        except PhaseError:
            raise
        except Exception as exc:
            raise PhaseError("pretrain", epoch, exc) from exc


def run_search(state: SearchState, log: MetricsLog | None = None) -> Architecture:
    state.phase = "search"
    cfg = state.config
    arch = derive_state(state)
    for epoch in range(1, cfg.search_epochs + 1):
        state.epoch = epoch
        try:
            w_losses, d_losses = [], []
            b1 = _batches(state.split.chi1, cfg.batch_size, state.batch_generator)
            b2 = _batches(state.split.chi2, cfg.batch_size, state.batch_generator)
            for i1, i2 in zip(b1, b2):
                lw, ld = search_step(
                    state, state.images[list(i1)], state.images[list(i2)], (i1, i2)
                )
                w_losses.append(lw)
                d_losses.append(ld)
            state.w_scheduler.step()
            state.temperature *= cfg.temperature_anneal
            arch = derive_state(state)
            report = derived_flops(state.spec, arch, cfg.eval_height, cfg.eval_width)
            lam = state.lambda_ctl.value
            if epoch % state.budget_cfg.check_interval == 0:
                lam = state.lambda_ctl.update(report.total)
            if log:
                log.write(
                    phase="search",
                    epoch=epoch,
                    loss_w=sum(w_losses) / len(w_losses),
                    loss_arch=sum(d_losses) / len(d_losses),
                    lam=lam,
                    derived_gflops=report.total / 1e9,
                    **_probe_components(state),
                )
        except PhaseError:
            raise
        except Exception as exc:
            raise PhaseError("search", epoch, exc) from exc
    return arch


def train_from_scratch(
    spec: SupernetSpec,
    arch: Architecture,
    images: torch.Tensor,
    teacher: TeacherModel,
    distill_cfg: DistillConfig,
    extractor: torch.nn.Module,
    cfg: RunConfig,
    log: MetricsLog | None = None,
) -> tuple[GeneratorSupernet, list[float]]:
    """Fresh weights for the derived architecture, trained on the whole dataset."""
    torch.manual_seed(cfg.seed + 1000)
    net = GeneratorSupernet(spec)
    student = DerivedGenerator(net, arch)
    optimizer, scheduler = _weight_optimizer(
        cfg,
        net.parameters(),
        cfg.scratch_epochs,
        cfg.scratch_lr,
        cfg.scratch_decay_start,
        cfg.scratch_milestones,
    )
    generator = torch.Generator().manual_seed(cfg.seed + 303)
    indices = tuple(range(images.size(0)))
    curve: list[float] = []
    for epoch in range(1, cfg.scratch_epochs + 1):
        try:
            losses = []
            for idx in _batches(indices, cfg.scratch_batch_size, generator):
                batch = images[list(idx)]
                loss = distance(student(batch), teacher(batch), distill_cfg, extractor)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
            scheduler.step()
            mean_loss = sum(losses) / len(losses)
            curve.append(mean_loss)
            if log:
                probe = images[: min(16, images.size(0))]
                with torch.no_grad():
                    components = distance_components(
                        student(probe), teacher(probe), distill_cfg, extractor
                    )
                log.write(phase="scratch", epoch=epoch, loss=mean_loss, **components)
        except Exception as exc:
            raise PhaseError("scratch", epoch, exc) from exc
    return net, curve


@dataclass
class RunResult:
    architecture: Architecture
    flops_report: object
    student: GeneratorSupernet
    scratch_curve: list[float]
    paths: dict[str, str]


def save_search_checkpoint(state: SearchState, path: str) -> None:
    tensors = {f"w.{k}": v for k, v in state.supernet.state_dict().items()}
    tensors.update({f"arch.{k}": v for k, v in state.arch_params.state_dict().items()})
    meta = {
        "phase": state.phase,
        "epoch": str(state.epoch),
        "config_hash": state.config.config_hash(),
        "lam": f"{state.lambda_ctl.value:.17g}",
        "temperature": f"{state.temperature:.17g}",
    }
    save_checkpoint(path, tensors, meta)


def load_search_checkpoint(state: SearchState, path: str) -> dict[str, str]:
    tensors, meta = load_checkpoint(path)
    w_state = {k[2:]: v for k, v in tensors.items() if k.startswith("w.")}
    arch_state = {k[5:]: v for k, v in tensors.items() if k.startswith("arch.")}
    state.supernet.load_state_dict(w_state)
    state.arch_params.load_state_dict(arch_state)
    if "lam" in meta:
        state.lambda_ctl.value = float(meta["lam"])
    if "temperature" in meta:
        state.temperature = float(meta["temperature"])
    return meta


def run(cfg: RunConfig) -> RunResult:
    """Execute pretrain, search, derive and train-from-scratch end to end."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = {
        "metrics": os.path.join(cfg.out_dir, "metrics.log"),
        "pretrain": os.path.join(cfg.out_dir, "pretrain.ckpt"),
        "search": os.path.join(cfg.out_dir, "search.ckpt"),
        "architecture": os.path.join(cfg.out_dir, "derived.arch"),
        "flops": os.path.join(cfg.out_dir, "flops_report.txt"),
        "student": os.path.join(cfg.out_dir, "student.ckpt"),
    }
    log = MetricsLog(paths["metrics"])
    state = build_state(cfg)

    run_pretrain(state, log)
    save_search_checkpoint(state, paths["pretrain"])

    arch = run_search(state, log)
    save_search_checkpoint(state, paths["search"])

    arch = with_provenance(
        arch,
        config=cfg.config_hash(),
        seed=cfg.seed,
        epoch=cfg.pretrain_epochs + cfg.search_epochs,
    )
    report = derived_flops(state.spec, arch, cfg.eval_height, cfg.eval_width)
    with open(paths["architecture"], "w") as handle:
        handle.write(export_architecture(arch))
    with open(paths["flops"], "w") as handle:
        handle.write(report.to_text())

    student, curve = train_from_scratch(
        state.spec, arch, state.images, state.teacher, state.distill_cfg, state.extractor, cfg, log
    )
    bundle = extract_student_weights(student, arch)
    save_checkpoint(
        paths["student"],
        bundle,
        {"phase": "scratch", "epoch": str(cfg.scratch_epochs), "config_hash": cfg.config_hash()},
    )
    return RunResult(arch, report, student, curve, paths)


def evaluate(
    student: DerivedGenerator,
    teacher: TeacherModel,
    images: torch.Tensor,
    distill_cfg: DistillConfig,
    extractor: torch.nn.Module,
    batch_size: int = 16,
) -> dict[str, float]:
    """Mean PSNR (peak 2.0 on [-1, 1] outputs) and distillation distance."""
    from .metrics import psnr

    total_psnr = 0.0
    total_distance = 0.0
    batches = 0
    with torch.no_grad():
        for start in range(0, images.size(0), batch_size):
            batch = images[start : start + batch_size]
            out_s = student(batch)
            out_t = teacher(batch)
            total_psnr += psnr(out_s, out_t, peak=2.0)
            total_distance += float(distance(out_s, out_t, distill_cfg, extractor))
            batches += 1
    return {"psnr": total_psnr / batches, "distance": total_distance / batches}

"""Composite detection loss, plain and DG-siamese train steps, checkpoints.

Determinism contract: every stochastic choice (batch selection, RoI
sampling, mix ratios, branch-domain choice) derives its seed from
(base_seed, step [, image index]), so an interrupted run resumed from a
checkpoint continues bit-identically under the single-threaded setup.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .. import assign as assignops
from .. import boxes as boxops
from .. import dginvariance, losses, probfusion
from .detector import Detector, decode_t

CHECKPOINT_VERSION = 1

# instrumentation: training-only mechanisms must never run at inference
COUNTERS = {"br": 0, "ssmc": 0, "grl": 0, "irm": 0}


def reset_counters() -> None:
    for k in COUNTERS:
        COUNTERS[k] = 0


class DivergenceError(RuntimeError):
    """Raised when a loss component goes non-finite or explodes."""


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class TrainState:
    model: Detector
    optimizer: torch.optim.Optimizer
    config: dict
    seed: int
    step: int = 0
    loss_history: list = field(default_factory=list)


def make_state(cfg: dict, seed: int, num_domains: int = 6) -> TrainState:
    torch.manual_seed(seed)
    model = Detector(cfg["detector"], num_domains=num_domains)
    tr = cfg["training"]
    optimizer = torch.optim.SGD(
        model.parameters(), lr=tr["lr"], momentum=tr["momentum"],
        weight_decay=tr["weight_decay"])
    return TrainState(model=model, optimizer=optimizer, config=cfg, seed=seed)


def _gt_arrays(annotations):
    if not annotations:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    boxes = np.stack([b.as_array() for b, _ in annotations])
    labels = np.array([c for _, c in annotations], dtype=np.int64)
    return boxes, labels


def _images_tensor(samples, key="image") -> torch.Tensor:
    arr = np.stack([s[key].transpose(2, 0, 1) for s in samples])
    return torch.as_tensor(arr, dtype=torch.float32)


def total_detection_loss(det: Detector, pyramid, obj_l, iou_l, reg_l,
                         anchors: np.ndarray, samples, cfg: dict,
                         step_seed: int, dg_active: bool = False):
    """All detection loss components for one batch.

    Returns (total tensor, components dict of tensors, extras) where extras
    carries the per-image second-stage logits/rois needed by the IRM hooks.
    """
    det_cfg = cfg["detector"]
    dg_cfg = cfg["dg"]
    anchors_t = torch.as_tensor(anchors, dtype=torch.float32)
    n_img = obj_l.shape[0]
    image_hw = samples[0]["image"].shape[:2]

    zero = obj_l.sum() * 0.0
    comp = {"rpn_cls": zero.clone(), "rpn_reg": zero.clone(),
            "rpn_iou": zero.clone(), "cls": zero.clone(),
            "reg": zero.clone()}
    irm_hooks = {"coord": [], "obj_pos": [], "obj_neg": [], "cls": []}

    proposals_per_image = []
    roi_meta = []

    for i in range(n_img):
        gt_boxes, gt_labels = _gt_arrays(samples[i]["annotations"])
        asn = assignops.assign_by_iou_threshold(
            anchors, gt_boxes, det_cfg["assign_threshold"])
        pos = asn.positive_indices
        n_pos = max(1, len(pos))
        labels_t = torch.as_tensor(asn.labels, dtype=torch.float32)

        probs = torch.sigmoid(obj_l[i])
        comp["rpn_cls"] = comp["rpn_cls"] + losses.focal_loss(
            probs, labels_t, det_cfg["focal_alpha"],
            det_cfg["focal_gamma"]) / n_pos
        if dg_active and dg_cfg["irm"]:
            pos_t = torch.as_tensor(pos, dtype=torch.long)
            neg_t = torch.as_tensor(asn.negative_indices, dtype=torch.long)
            logits_i = obj_l[i]
            irm_hooks["obj_pos"].append(
                lambda r, L=logits_i[pos_t]: losses.binary_cross_entropy(
                    torch.sigmoid(L * r), torch.ones(len(L))) / max(1, len(L)))
            irm_hooks["obj_neg"].append(
                lambda r, L=logits_i[neg_t]: losses.binary_cross_entropy(
                    torch.sigmoid(L * r), torch.zeros(len(L))) / max(1, len(L)))

        if len(pos) > 0:
            pos_t = torch.as_tensor(pos, dtype=torch.long)
            matched = torch.as_tensor(
                gt_boxes[asn.matched_gt_index[pos]], dtype=torch.float32)
            pred_boxes = decode_t(reg_l[i][pos_t], anchors_t[pos_t])
            kind = det_cfg["rpn_regression"]
            if kind == "fiou":
                reg_loss = losses.fiou_loss(
                    pred_boxes, matched, anchors_t[pos_t],
                    det_cfg["fiou_eta"], detach_factor=True)
            elif kind in losses.DELTA_KINDS:
                targets = losses.encode_t(matched, anchors_t[pos_t])
                reg_loss = losses.reference_regression_loss(
                    kind, reg_l[i][pos_t], targets)
            else:
                reg_loss = losses.reference_regression_loss(
                    kind, pred_boxes, matched)
            comp["rpn_reg"] = comp["rpn_reg"] + reg_loss / n_pos

            q = torch.sigmoid(iou_l[i][pos_t])
            with torch.no_grad():
                iou_target = losses.box_iou_t(pred_boxes.detach(), matched)
            comp["rpn_iou"] = comp["rpn_iou"] + losses.binary_cross_entropy(
                q, iou_target.float()) / n_pos

            if dg_active and dg_cfg["irm"]:
                deltas_i = reg_l[i][pos_t]
                tgt = losses.encode_t(matched, anchors_t[pos_t])
                irm_hooks["coord"].append(
                    lambda r, D=deltas_i, T=tgt: ((D * r - T) ** 2).sum()
                    / max(1, D.shape[0]))

        # proposal selection (no grad) + GT boxes appended for stability
        prior_i = det.prior_from_logits(obj_l[i], iou_l[i])
        prop_boxes, prop_priors = det.select_proposals(
            prior_i, reg_l[i], anchors, image_hw)
        if gt_boxes.shape[0] > 0:
            best_anchor = boxops.pairwise_iou(anchors, gt_boxes).argmax(axis=0)
            gt_prior = prior_i.detach().numpy()[best_anchor]
            prop_boxes = np.concatenate([prop_boxes, gt_boxes], axis=0)
            prop_priors = np.concatenate([prop_priors, gt_prior], axis=0)

        pa = assignops.assign_by_iou_threshold(
            prop_boxes, gt_boxes, det_cfg["assign_threshold"],
            force_match=False) if prop_boxes.shape[0] else None
        if pa is None:
            proposals_per_image.append(np.zeros((0, 4)))
            roi_meta.append(None)
            continue
        sel = assignops.sample_rois(
            pa, det_cfg["roi_batch"], det_cfg["roi_positive_fraction"],
            rng_seed=derive_seed(step_seed, "roi", i))
        rois = prop_boxes[sel]
        roi_labels = np.where(
            pa.labels[sel] == 1,
            gt_labels[pa.matched_gt_index[sel].clip(min=0)]
            if gt_labels.size else 0,
            det.num_classes)
        roi_gt = (gt_boxes[pa.matched_gt_index[sel].clip(min=0)]
                  if gt_boxes.size else np.zeros((len(sel), 4)))
        proposals_per_image.append(rois)
        roi_meta.append({
            "labels": roi_labels,
            "priors": prop_priors[sel],
            "gt_boxes": roi_gt,
            "is_fg": pa.labels[sel] == 1,
        })

    probs_list, reg_list, logits_list = det.forward_second_stage(
        pyramid, proposals_per_image)

    n_roi_total = 0
    for i in range(n_img):
        meta = roi_meta[i]
        if meta is None or len(meta["labels"]) == 0:
            continue
        logits = logits_list[i]
        labels_t = torch.as_tensor(meta["labels"], dtype=torch.long)
        ce = torch.nn.functional.cross_entropy(
            logits, labels_t, reduction="none")
        gamma = dg_cfg["br_gamma"]
        if gamma > 0:
            COUNTERS["br"] += 1
            priors_t = torch.as_tensor(meta["priors"], dtype=torch.float32)
            weights = probfusion.boosting_weights(
                priors_t, meta["is_fg"], gamma)
            ce = ce * weights
        comp["cls"] = comp["cls"] + ce.sum() / max(1, len(labels_t))
        n_roi_total += len(labels_t)

        if dg_active and dg_cfg["irm"]:
            irm_hooks["cls"].append(
                lambda r, L=logits, T=labels_t:
                torch.nn.functional.cross_entropy(L * r, T))

        fg = np.flatnonzero(meta["is_fg"])
        if len(fg) > 0:
            fg_t = torch.as_tensor(fg, dtype=torch.long)
            rois_t = torch.as_tensor(
                proposals_per_image[i][fg], dtype=torch.float32)
            gt_t = torch.as_tensor(meta["gt_boxes"][fg], dtype=torch.float32)
            target_deltas = losses.encode_t(gt_t, rois_t)
            comp["reg"] = comp["reg"] + losses.reference_regression_loss(
                "smooth_l1", reg_list[i][fg_t], target_deltas) / len(fg)

    extras = {"irm_hooks": irm_hooks, "n_rois": n_roi_total}
    total = sum(comp.values())
    return total, comp, extras


def _irm_penalty_total(irm_hooks) -> torch.Tensor:
    """Sum of per-term, per-image IRM penalties (each image = environment)."""
    total = torch.zeros((), dtype=torch.float64)
    for hooks in irm_hooks.values():
        for fn in hooks:
            total = total + dginvariance.irm_penalty(fn)
    return total


def _check_and_step(state: TrainState, total: torch.Tensor,
                    comp: dict) -> dict:
    for name, value in comp.items():
        v = float(value.detach())
        if not np.isfinite(v):
            raise DivergenceError(f"non-finite loss component: {name}")
    total_v = float(total.detach())
    if total_v > 1e4:
        raise DivergenceError(f"loss diverged: total={total_v:.3g}")
    state.optimizer.zero_grad()
    total.backward()
    torch.nn.utils.clip_grad_norm_(
        state.model.parameters(), state.config["training"]["grad_clip"])
    state.optimizer.step()
    state.step += 1
    out = {k: float(v.detach()) for k, v in comp.items()}
    out["total"] = total_v
    return out


def train_step(state: TrainState, samples) -> dict:
    """One plain SGD step on a batch of {image, annotations} samples."""
    state.model.train()
    x = _images_tensor(samples)
    _, _, pyramid = state.model.extract_features(x)
    obj, iou, reg = state.model.forward_first_stage(pyramid)
    anchors = state.model.anchors_for(samples[0]["image"].shape[:2])
    step_seed = derive_seed(state.seed, state.step)
    total, comp, _ = total_detection_loss(
        state.model, pyramid, obj, iou, reg, anchors, samples,
        state.config, step_seed)
    return _check_and_step(state, total, comp)


def dg_train_step(state: TrainState, samples, domain_index=None,
                  forced_plan: dginvariance.MixPlan | None = None) -> dict:
    """Siamese DG step: each sample carries a `branch` image sharing its
    annotations exactly. Runs the mixup plan, SSMC at the last backbone
    stage, and the optional GRL / IRM terms.

    When every branch equals its main image and all mix ratios are 1, the
    step reduces exactly to train_step (degenerate siamese).
    """
    cfg = state.config
    dg = cfg["dg"]
    for s in samples:
        if "branch" not in s or s["branch"] is None:
            raise ValueError("dg_train_step requires a branch image per sample")
        if s.get("branch_annotations") is not None and \
                s["branch_annotations"] != s["annotations"]:
            raise ValueError("annotation mismatch between pair members")

    identity_pair = all(
        np.array_equal(s["image"], s["branch"]) for s in samples)
    lambdas_all_one = (forced_plan is not None
                       and all(v >= 1.0 for v in forced_plan.lambdas.values()))
    if identity_pair and (lambdas_all_one or not dg["dmx"]) \
            and not dg["grl"] and not dg["irm"]:
        # degenerate siamese: identical branch contributes nothing
        out = train_step(state, samples)
        out["ssmc"] = 0.0
        return out

    state.model.train()
    step_seed = derive_seed(state.seed, state.step)

    plan = forced_plan
    mix_lambdas = None
    if dg["dmx"]:
        if plan is None:
            plan = dginvariance.sample_mix_ratios(
                dg["dmx_layers"], dg["dmx_alpha"],
                rng_seed=derive_seed(step_seed, "dmx"))
        mix_lambdas = plan.lambdas

    x = _images_tensor(samples)
    xb = _images_tensor(samples, key="branch")
    feats, branch_feats, pyramid = state.model.extract_features(
        x, branch=xb, mix_lambdas=mix_lambdas,
        detach_branch=dg["dmx_detach_branch"])
    obj, iou, reg = state.model.forward_first_stage(pyramid)
    anchors = state.model.anchors_for(samples[0]["image"].shape[:2])
    total, comp, extras = total_detection_loss(
        state.model, pyramid, obj, iou, reg, anchors, samples,
        cfg, step_seed, dg_active=True)

    if dg["ssmc"]:
        COUNTERS["ssmc"] += 1
        hw = feats[-1].shape[-2] * feats[-1].shape[-1]
        k = max(1, int(hw * dg["ssmc_k_fraction"]))
        ssmc = sum(
            dginvariance.ssmc_loss(feats[-1][i], branch_feats[-1][i],
                                   k=k, delta=dg["ssmc_delta"])
            for i in range(len(samples))) / len(samples)
        comp["ssmc"] = ssmc
        total = total + ssmc

    if dg["grl"]:
        COUNTERS["grl"] += 1
        if domain_index is None:
            domain_index = [0] * len(samples)
        d_loss = dginvariance.domain_adversarial_loss(
            feats[-1], domain_index, state.model.domain_classifier,
            grl_scale=1.0)
        comp["domain"] = dg["grl_lambda"] * d_loss
        total = total + comp["domain"]

    if dg["irm"]:
        COUNTERS["irm"] += 1
        pen = _irm_penalty_total(extras["irm_hooks"])
        comp["irm"] = dg["irm_lambda"] * pen.float()
        total = total + comp["irm"]

    return _check_and_step(state, total, comp)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str) -> None:
    """Single self-describing archive: weights + config + step + version."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "seed": state.seed,
        "loss_history": state.loss_history,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


class CheckpointVersionError(RuntimeError):
    pass


def load_checkpoint(path: str, num_domains: int = 6) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {payload.get('format_version')} "
            f"!= supported {CHECKPOINT_VERSION}")
    state = make_state(payload["config"], payload["seed"],
                       num_domains=num_domains)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = payload["step"]
    state.loss_history = payload.get("loss_history", [])
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

MODES = ("deepall", "boosting", "dmc", "dg-adv")


def apply_mode(cfg: dict, mode: str) -> dict:
    """Resolve the mode contract onto the dg section.

    deepall disables every DG toggle (including BR) regardless of config;
    boosting keeps BR only; dmc enables DMX + SSMC; dg-adv enables GRL + IRM.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode: {mode}")
    out = json.loads(json.dumps(cfg))
    dg = out["dg"]
    dg["dmx"] = mode == "dmc"
    dg["ssmc"] = mode == "dmc"
    dg["grl"] = mode == "dg-adv"
    dg["irm"] = mode == "dg-adv"
    if mode == "deepall":
        dg["br_gamma"] = 0.0
    return out


def run_training(cfg: dict, train_samples, mode: str, out_dir: str,
                 seed: int, domain_transforms=None, source_ids=None,
                 log_fn=None, resume_from: str | None = None) -> TrainState:
    """Train for cfg['training']['steps'] steps; writes loss log + checkpoint.

    DG modes build the siamese branch by re-rendering each sample's clear
    image into a random other source domain. On divergence the last
    checkpoint is kept and DivergenceError propagates.
    """
    cfg = apply_mode(cfg, mode)
    tr = cfg["training"]
    os.makedirs(out_dir, exist_ok=True)
    if resume_from:
        state = load_checkpoint(resume_from)
    else:
        state = make_state(cfg, seed)
    needs_pairs = mode in ("dmc", "dg-adv")
    source_ids = source_ids or sorted({s["domain_id"] for s in train_samples})
    domain_pos = {d: i for i, d in enumerate(source_ids)}

    log_path = os.path.join(out_dir, "loss_log.jsonl")
    log_file = open(log_path, "a" if resume_from else "w", encoding="utf-8")
    ckpt_path = os.path.join(out_dir, "checkpoint.pt")
    try:
        while state.step < tr["steps"]:
            step = state.step
            rng = np.random.default_rng(derive_seed(seed, "batch", step))
            idx = rng.choice(len(train_samples),
                             size=min(tr["batch_size"], len(train_samples)),
                             replace=False)
            batch = [dict(train_samples[int(j)]) for j in idx]
            if needs_pairs:
                if domain_transforms is None:
                    raise ValueError("DG modes need domain_transforms")
                for bi, s in enumerate(batch):
                    choices = [d for d in source_ids if d != s["domain_id"]]
                    pick = choices[int(rng.integers(0, len(choices)))]
                    s["branch"] = domain_transforms[pick](s["clear"])
                record = dg_train_step(
                    state, batch,
                    domain_index=[domain_pos[s["domain_id"]] for s in batch])
            else:
                record = train_step(state, batch)
            record["step"] = state.step
            state.loss_history.append(record["total"])
            if state.step % tr["log_every"] == 0 or state.step == tr["steps"]:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
                if log_fn:
                    log_fn(record)
            if state.step % tr["checkpoint_every"] == 0 \
                    or state.step == tr["steps"]:
                save_checkpoint(state, ckpt_path)
    except DivergenceError:
        save_checkpoint(state, os.path.join(out_dir, "checkpoint_last.pt"))
        raise
    finally:
        log_file.close()
    save_checkpoint(state, ckpt_path)
    return state

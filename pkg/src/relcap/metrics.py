"""Evaluation machinery for relational captioning.

Covers the caption-similarity score (exact + stem alignment with a
fragmentation penalty), average precision over a grid of language and
dual-box localization thresholds, image-level recall, diversity counts,
phrase/relationship detection recall, and POS tagging accuracy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, iou, union_box
from .stemming import porter_stem

_STEM_CACHE: dict[str, str] = {}


def _stem(token: str) -> str:
    s = _STEM_CACHE.get(token)
    if s is None:
        s = porter_stem(token)
        _STEM_CACHE[token] = s
    return s


class EmptyCaptionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MetricConfig:
    meteor_thresholds: tuple = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
    iou_thresholds: tuple = (0.2, 0.3, 0.4, 0.5, 0.6)
    vrd_iou: float = 0.5
    vrd_meteor: float = 0.25
    keep_after_nms: int = 50


@dataclass
class PredictionRecord:
    """One decoded relational caption, as written to the predictions file."""

    image_id: int
    subject_box: Box
    object_box: Box
    tokens: list
    pos: list                  # tag names; empty when the model has no POS head
    word_probs: list
    confidence: float

    def validate(self):
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside (0, 1]")
        if self.pos and len(self.pos) != len(self.tokens):
            raise ValueError(f"{len(self.pos)} POS tags for {len(self.tokens)} tokens")
        if len(self.word_probs) not in (len(self.tokens), len(self.tokens) + 1):
            raise ValueError(
                f"{len(self.word_probs)} word probabilities for {len(self.tokens)} tokens"
            )
        prod = float(np.prod(self.word_probs)) if self.word_probs else 1.0
        if abs(prod - self.confidence) > 1e-9:
            raise ValueError("confidence does not equal the product of word probabilities")
        return self

    @property
    def union(self) -> Box:
        return union_box(self.subject_box, self.object_box)


def meteor_lite(candidate, reference) -> float:
    """Unigram alignment score in [0, 1].

    Tokens are aligned greedily left-to-right, exact surface matches
    first, then Porter-stem matches, each token used at most once.
    With m matches: P = m/|cand|, R = m/|ref|, F = 10PR / (R + 9P),
    and the fragmentation penalty is 0.5 * (chunks / m)^3.
    """
    cand = [t.lower() for t in candidate]
    ref = [t.lower() for t in reference]
    if not cand or not ref:
        warnings.warn("empty candidate or reference caption scores 0", EmptyCaptionWarning)
        return 0.0

    align = [-1] * len(cand)
    used = [False] * len(ref)
    for i, tok in enumerate(cand):
        for j, rtok in enumerate(ref):
            if not used[j] and rtok == tok:
                align[i] = j
                used[j] = True
                break
    for i, tok in enumerate(cand):
        if align[i] >= 0:
            continue
        st = _stem(tok)
        for j, rtok in enumerate(ref):
            if not used[j] and _stem(rtok) == st:
                align[i] = j
                used[j] = True
                break

    m = sum(1 for a in align if a >= 0)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    fmean = 10.0 * precision * recall / (recall + 9.0 * precision)

    chunks = 0
    prev = None
    for i, a in enumerate(align):
        if a < 0:
            continue
        if prev is None or i != prev[0] + 1 or a != prev[1] + 1:
            chunks += 1
        prev = (i, a)
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1.0 - penalty)


def _group_by_image(items, key=lambda x: x.image_id):
    groups = {}
    for item in items:
        groups.setdefault(key(item), []).append(item)
    return groups


def _ranked(predictions):
    """Global confidence ranking; ties broken by image id then input order."""
    return sorted(range(len(predictions)),
                  key=lambda k: (-predictions[k].confidence, predictions[k].image_id, k))


def relational_map(predictions, gts, config: MetricConfig | None = None) -> float:
    """Mean average precision (percent) over the language x localization grid.

    A ranked prediction is a true positive at thresholds (mt, it) when some
    still-unmatched ground-truth relation in its image has subject IoU and
    object IoU both >= it and caption score >= mt; each ground truth is
    consumed once, the candidate with the largest min(IoU_s, IoU_o) first.
    """
    config = config or MetricConfig()
    if not gts:
        raise ValueError("relational mAP is undefined without ground-truth relations")
    gt_groups = _group_by_image(gts)
    n_gt = len(gts)

    order = _ranked(predictions)
    # cache per-prediction candidate scores against its image's GT
    cand_scores = []
    for k in order:
        pred = predictions[k]
        rows = []
        for j, gt in enumerate(gt_groups.get(pred.image_id, [])):
            iou_s = iou(pred.subject_box, gt.subject_box)
            iou_o = iou(pred.object_box, gt.object_box)
            rows.append((j, iou_s, iou_o, meteor_lite(pred.tokens, gt.tokens)))
        cand_scores.append((pred.image_id, rows))

    aps = []
    for mt in config.meteor_thresholds:
        for it in config.iou_thresholds:
            matched = {img: [False] * len(g) for img, g in gt_groups.items()}
            tp_flags = []
            for image_id, rows in cand_scores:
                taken = matched.get(image_id)
                best = None
                for j, iou_s, iou_o, met in rows:
                    if taken[j] or iou_s < it or iou_o < it or met < mt:
                        continue
                    quality = min(iou_s, iou_o)
                    if best is None or quality > best[0]:
                        best = (quality, j)
                if best is not None:
                    taken[best[1]] = True
                    tp_flags.append(1)
                else:
                    tp_flags.append(0)
            ap = 0.0
            tp_cum = 0
            for rank, flag in enumerate(tp_flags, start=1):
                if flag:
                    tp_cum += 1
                    ap += (1.0 / n_gt) * (tp_cum / rank)
            aps.append(ap)
    return 100.0 * float(np.mean(aps))


def image_level_recall(predictions, gts, meteor_thresholds=None) -> float:
    """Recall of GT captions by the bag of predicted captions per image.

    For each threshold t a GT caption counts as covered when some predicted
    caption in the image scores >= t against it; the covered fraction is
    averaged over thresholds, then over images.
    """
    thresholds = tuple(MetricConfig().meteor_thresholds if meteor_thresholds is None
                       else meteor_thresholds)
    gt_groups = _group_by_image(gts)
    if not gt_groups:
        raise ValueError("image-level recall needs at least one GT caption per image")
    pred_groups = _group_by_image(predictions)
    per_image = []
    for image_id, gt_list in gt_groups.items():
        preds = pred_groups.get(image_id, [])
        best = []
        for gt in gt_list:
            best.append(max((meteor_lite(p.tokens, gt.tokens) for p in preds), default=-1.0))
        covered = [np.mean([1.0 if b >= t else 0.0 for b in best]) for t in thresholds]
        per_image.append(float(np.mean(covered)))
    return float(np.mean(per_image))


def mean_meteor(predictions, gts) -> float:
    """Average caption score of predictions against their best-matching GT."""
    if not predictions:
        return 0.0
    gt_groups = _group_by_image(gts)
    scores = []
    for pred in predictions:
        gt_list = gt_groups.get(pred.image_id, [])
        scores.append(max((meteor_lite(pred.tokens, gt.tokens) for gt in gt_list), default=0.0))
    return float(np.mean(scores))


def diversity_stats(predictions):
    """(words/img, words/box): mean unique word types per image and per box."""
    if not predictions:
        return 0.0, 0.0
    per_image = {}
    per_box = {}
    for pred in predictions:
        per_image.setdefault(pred.image_id, set()).update(pred.tokens)
        for box in (pred.subject_box, pred.object_box):
            key = (pred.image_id, box.x, box.y, box.w, box.h)
            per_box.setdefault(key, set()).update(pred.tokens)
    words_per_img = float(np.mean([len(s) for s in per_image.values()]))
    words_per_box = float(np.mean([len(s) for s in per_box.values()]))
    return words_per_img, words_per_box


def vrd_recall_at_k(predictions, gts, k: int, mode: str,
                    config: MetricConfig | None = None) -> float:
    """Detection-style recall at top-k predictions per image.

    ``mode`` "phrase" matches on the IoU of the union boxes; "relationship"
    requires both endpoint boxes to clear the localization threshold. The
    caption must score at least the configured language threshold.
    """
    if k <= 0:
        raise ValueError("vrd_recall_at_k: k must be positive")
    if mode not in ("phrase", "relationship"):
        raise ValueError(f"unknown mode {mode!r}")
    config = config or MetricConfig()
    gt_groups = _group_by_image(gts)
    if not gt_groups:
        raise ValueError("vrd recall needs ground-truth relations")
    pred_groups = _group_by_image(predictions)
    recalls = []
    for image_id, gt_list in gt_groups.items():
        preds = sorted(pred_groups.get(image_id, []), key=lambda p: -p.confidence)[:k]
        covered = 0
        for gt in gt_list:
            gt_union = union_box(gt.subject_box, gt.object_box)
            for p in preds:
                if meteor_lite(p.tokens, gt.tokens) < config.vrd_meteor:
                    continue
                if mode == "phrase":
                    ok = iou(p.union, gt_union) >= config.vrd_iou
                else:
                    ok = (iou(p.subject_box, gt.subject_box) >= config.vrd_iou
                          and iou(p.object_box, gt.object_box) >= config.vrd_iou)
                if ok:
                    covered += 1
                    break
        recalls.append(covered / len(gt_list))
    return float(np.mean(recalls))


def pos_accuracy(predicted_tags, gt_tags):
    """Token-level tag accuracy, overall and per class.

    Both arguments are sequences of aligned tag-name sequences; a length
    mismatch within any pair is a contract violation.
    """
    counts = {"SUBJ": [0, 0], "PRED": [0, 0], "OBJ": [0, 0]}
    total = [0, 0]
    for pred_seq, gt_seq in zip(predicted_tags, gt_tags, strict=True):
        if len(pred_seq) != len(gt_seq):
            raise ValueError(f"tag sequences of length {len(pred_seq)} vs {len(gt_seq)}")
        for p, g in zip(pred_seq, gt_seq):
            hit = 1 if p == g else 0
            counts[g][0] += hit
            counts[g][1] += 1
            total[0] += hit
            total[1] += 1
    out = {"overall": total[0] / total[1] if total[1] else 0.0}
    for tag, (hit, seen) in counts.items():
        out[tag] = hit / seen if seen else 0.0
    return out


@dataclass
class EvalReport:
    map_percent: float
    image_level_recall: float
    mean_meteor: float
    words_per_img: float
    words_per_box: float
    vrd_phrase_recall: dict = field(default_factory=dict)        # k -> recall
    vrd_relationship_recall: dict = field(default_factory=dict)  # k -> recall
    pos_accuracy: dict | None = None

    def validate(self):
        if not 0.0 <= self.map_percent <= 100.0:
            raise ValueError(f"map_percent {self.map_percent} outside [0, 100]")
        unit = {"image_level_recall": self.image_level_recall,
                "mean_meteor": self.mean_meteor}
        unit.update({f"vrd_phrase@{k}": v for k, v in self.vrd_phrase_recall.items()})
        unit.update({f"vrd_rel@{k}": v for k, v in self.vrd_relationship_recall.items()})
        if self.pos_accuracy is not None:
            unit.update({f"pos_{k}": v for k, v in self.pos_accuracy.items()})
        for name, value in unit.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} = {value} outside [0, 1]")
        if self.words_per_img < 0 or self.words_per_box < 0:
            raise ValueError("diversity statistics must be non-negative")
        return self

    def to_json(self) -> dict:
        return {
            "map_percent": self.map_percent,
            "image_level_recall": self.image_level_recall,
            "mean_meteor": self.mean_meteor,
            "words_per_img": self.words_per_img,
            "words_per_box": self.words_per_box,
            "vrd_phrase_recall": {str(k): v for k, v in self.vrd_phrase_recall.items()},
            "vrd_relationship_recall": {str(k): v for k, v in self.vrd_relationship_recall.items()},
            "pos_accuracy": self.pos_accuracy,
        }

    @staticmethod
    def from_json(obj) -> "EvalReport":
        return EvalReport(
            map_percent=obj["map_percent"],
            image_level_recall=obj["image_level_recall"],
            mean_meteor=obj["mean_meteor"],
            words_per_img=obj["words_per_img"],
            words_per_box=obj["words_per_box"],
            vrd_phrase_recall={int(k): v for k, v in obj["vrd_phrase_recall"].items()},
            vrd_relationship_recall={int(k): v for k, v in obj["vrd_relationship_recall"].items()},
            pos_accuracy=obj.get("pos_accuracy"),
        )

    def render_table(self) -> str:
        rows = [
            ("relational mAP (%)", f"{self.map_percent:.3f}"),
            ("image-level recall", f"{self.image_level_recall:.4f}"),
            ("mean METEOR", f"{self.mean_meteor:.4f}"),
            ("words/img", f"{self.words_per_img:.2f}"),
            ("words/box", f"{self.words_per_box:.2f}"),
        ]
        for k in sorted(self.vrd_phrase_recall):
            rows.append((f"phrase R@{k}", f"{self.vrd_phrase_recall[k]:.4f}"))
        for k in sorted(self.vrd_relationship_recall):
            rows.append((f"relationship R@{k}", f"{self.vrd_relationship_recall[k]:.4f}"))
        if self.pos_accuracy is not None:
            for key in ("overall", "SUBJ", "PRED", "OBJ"):
                rows.append((f"POS acc ({key})", f"{self.pos_accuracy[key]:.4f}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)

"""Turn detections into a short spoken-style sentence using the pill catalog."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .dataset import PillRecord
from .postprocess import Detection, score_order

EMPTY = "No pills detected."


class UnknownClassError(KeyError):
    pass


@dataclass(frozen=True)
class Utterance:
    text: str
    item_count: int


def percent(score: float) -> int:
    # half-up; scores are non-negative
    return int(math.floor(score * 100 + 0.5))


def describe(det: Detection, rec: PillRecord) -> str:
    return (f"{rec.shape} {rec.color_name} pill, class {det.class_id}, {rec.active_ingredient}, "
            f"confidence {percent(det.score)} percent")


def announce(dets: list[Detection], catalog, max_items: int = 3) -> Utterance:
    if max_items < 0:
        raise ValueError("max_items must be >= 0")
    by_id = {r.class_id: r for r in catalog}
    for d in dets:
        if d.class_id not in by_id:
            raise UnknownClassError(f"class_id {d.class_id} is not in the catalog")
    chosen = [dets[i] for i in score_order(dets)[:max_items]]
    if not chosen:
        return Utterance(EMPTY, 0)
    return Utterance("; ".join(describe(d, by_id[d.class_id]) for d in chosen), len(chosen))

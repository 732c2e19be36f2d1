"""Readers and writers for interactions, evidence pools, checkpoints, logs and reports."""
import json
import logging
import os
from dataclasses import asdict, replace
from typing import Any, Callable, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from .exceptions import CheckpointError, DatasetError
from .models import (
    CHECKPOINT_VERSION,
    AdamState,
    AttributePayload,
    Checkpoint,
    EvidenceItem,
    EvidencePool,
    EvidenceSource,
    HistoryPayload,
    IdMap,
    Interaction,
    InteractionDataset,
    KgPayload,
    ModelParams,
    PARAM_NAMES,
    Payload,
    TRAIN_LOG_COLUMNS,
    TrainLog,
)

logger = logging.getLogger(__name__)

INTERACTION_HEADER = "user_id\titem_id\trating\ttimestamp\tenv_id"
SPARSE_ID_SLACK = 1024


def _ensure_parent(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


# Interactions

def save_interactions(dataset: InteractionDataset, path: str) -> None:
    """Write the tab-separated interactions file with a header line, in raw ids."""
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(INTERACTION_HEADER + "\n")
        for x in dataset.interactions:
            user, item = dataset.raw_user(x.user_id), dataset.raw_item(x.item_id)
            f.write(f"{user}\t{item}\t{x.rating!r}\t{x.timestamp}\t{x.env_id}\n")
    logger.info(f"Wrote {len(dataset.interactions)} interactions to {path}")


def build_id_map(ids: Iterable[int], catalog: Optional[int] = None) -> Optional[IdMap]:
    """None when ``ids`` can be used as indices directly, else a map onto 0..n-1.

    Ids fit when they are below a known catalog size, or when the unused slots below the
    largest id number at most max(#distinct, SPARSE_ID_SLACK).
    """
    distinct = sorted(set(ids))
    top = distinct[-1] + 1
    if catalog is not None and top <= catalog:
        return None
    if top - len(distinct) <= max(len(distinct), SPARSE_ID_SLACK):
        return None
    return IdMap(tuple(distinct))


def load_interactions(path: str, num_items: Optional[int] = None, num_envs: Optional[int] = None) -> InteractionDataset:
    """Parse the interactions TSV and index users and items densely.

    Catalog sizes default to max id + 1; sparse id spaces are remapped (see build_id_map)
    and the maps are kept on the dataset.
    """
    interactions: List[Interaction] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if line_no == 1 and not _is_number(fields[0]):
                continue
            if len(fields) != 5:
                raise DatasetError("malformed-line", f"{path}:{line_no}: expected 5 fields, got {len(fields)}")
            try:
                x = Interaction(
                    user_id=int(fields[0]),
                    item_id=int(fields[1]),
                    rating=float(fields[2]),
                    timestamp=int(fields[3]),
                    env_id=int(fields[4]),
                )
            except ValueError as e:
                raise DatasetError("malformed-line", f"{path}:{line_no}: {str(e)}")
            if min(x.user_id, x.item_id, x.env_id) < 0:
                raise DatasetError("malformed-line", f"{path}:{line_no}: ids must be non-negative")
            interactions.append(x)
    if not interactions:
        raise DatasetError("empty-dataset", f"{path} contains no interactions")
    interactions.sort(key=lambda x: (x.user_id, x.timestamp))
    user_map = build_id_map(x.user_id for x in interactions)
    item_map = build_id_map((x.item_id for x in interactions), num_items)
    if user_map is not None or item_map is not None:
        interactions = [
            replace(
                x,
                user_id=user_map.to_dense(x.user_id) if user_map is not None else x.user_id,
                item_id=item_map.to_dense(x.item_id) if item_map is not None else x.item_id,
            )
            for x in interactions
        ]
        logger.info(
            f"Remapped sparse ids in {path}: "
            f"{len(user_map) if user_map else 'identity'} users, {len(item_map) if item_map else 'identity'} items"
        )
    dataset = InteractionDataset(
        interactions=tuple(interactions),
        num_users=len(user_map) if user_map is not None else max(x.user_id for x in interactions) + 1,
        num_items=len(item_map) if item_map is not None else max(num_items or 0, max(x.item_id for x in interactions) + 1),
        num_envs=max(num_envs or 0, max(x.env_id for x in interactions) + 1),
        user_map=user_map,
        item_map=item_map,
    )
    dataset.validate()
    logger.info(f"Loaded {len(interactions)} interactions from {path}")
    return dataset


# Evidence pool

def _evidence_record(ev: EvidenceItem) -> Dict[str, Any]:
    record: Dict[str, Any] = {"id": ev.id, "source": ev.source.value, "stability_var": ev.stability_var}
    record.update(asdict(ev.payload))
    if ev.user_id is not None:
        record["user_id"] = ev.user_id
    if ev.embedding is not None:
        record["embedding"] = [float(v) for v in ev.embedding]
    return record


def save_evidence_pool(pool: EvidencePool, path: str) -> None:
    """One JSON object per line, keys sorted."""
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ev in pool.items:
            f.write(json.dumps(_evidence_record(ev), sort_keys=True) + "\n")
    logger.info(f"Wrote {len(pool)} evidence records to {path}")


def _parse_evidence(record: Dict[str, Any], where: str) -> EvidenceItem:
    try:
        source = EvidenceSource(record["source"])
    except ValueError:
        raise DatasetError("unknown-source", f"{where}: unknown source {record.get('source')!r}")
    try:
        if source is EvidenceSource.HISTORY:
            payload = HistoryPayload(int(record["item_id"]), float(record["rating"]), int(record["timestamp"]))
        elif source is EvidenceSource.ATTRIBUTE:
            payload = AttributePayload(str(record["attr_name"]), str(record["attr_value"]), int(record.get("item_id", -1)))
        else:
            payload = KgPayload(int(record["head"]), str(record["relation"]), int(record["tail"]))
        embedding = record.get("embedding")
        return EvidenceItem(
            id=int(record["id"]),
            source=source,
            payload=payload,
            user_id=int(record["user_id"]) if record.get("user_id") is not None else None,
            embedding=np.asarray(embedding, dtype=np.float64) if embedding is not None else None,
            stability_var=float(record.get("stability_var", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError("malformed-line", f"{where}: {str(e)}")


def load_evidence_pool(path: str) -> EvidencePool:
    """Parse line-delimited evidence records; an empty file yields an empty pool."""
    items: Dict[int, EvidenceItem] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            where = f"{path}:{line_no}"
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                raise DatasetError("malformed-line", f"{where}: {str(e)}")
            if "source" not in record:
                raise DatasetError("malformed-line", f"{where}: missing source")
            ev = _parse_evidence(record, where)
            if ev.id in items:
                raise DatasetError("duplicate-evidence-id", f"{where}: evidence id {ev.id} appears twice")
            items[ev.id] = ev
    pool = EvidencePool.from_items([items[i] for i in sorted(items)])
    logger.info(f"Loaded {len(pool)} evidence records from {path}")
    return pool


def _remap_payload(payload: Payload, item: Callable[[int], int]) -> Payload:
    if isinstance(payload, HistoryPayload):
        return replace(payload, item_id=item(payload.item_id))
    if isinstance(payload, AttributePayload):
        return replace(payload, item_id=item(payload.item_id)) if payload.item_id >= 0 else payload
    return replace(payload, head=item(payload.head), tail=item(payload.tail))


def remap_evidence_pool(pool: EvidencePool, dataset: InteractionDataset) -> EvidencePool:
    """Translate a raw-id pool into the dataset's dense id space.

    Records naming a user or item absent from the interactions are dropped and the
    remaining evidence is renumbered in order.
    """
    if dataset.user_map is None and dataset.item_map is None:
        return pool
    kept: List[EvidenceItem] = []
    for ev in pool.items:
        try:
            payload = _remap_payload(ev.payload, dataset.dense_item)
            user = dataset.dense_user(ev.user_id) if ev.user_id is not None else None
        except DatasetError:
            continue
        kept.append(replace(ev, id=len(kept), payload=payload, user_id=user))
    if len(kept) < len(pool):
        logger.warning(f"Dropped {len(pool) - len(kept)} evidence records that name ids absent from the interactions")
    return EvidencePool.from_items(kept)


# Meta records

def save_meta(meta: Dict[str, Any], path: str) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_meta(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# Checkpoints

def _pack(array: np.ndarray) -> Dict[str, Any]:
    array = np.asarray(array, dtype=np.float64)
    return {"shape": list(array.shape), "data": [float(v) for v in array.ravel()]}


def _unpack(blob: Dict[str, Any]) -> np.ndarray:
    return np.asarray(blob["data"], dtype=np.float64).reshape(blob["shape"])


def checkpoint_to_json(ckpt: Checkpoint) -> str:
    document = {
        "version": ckpt.version,
        "hyperparams": ckpt.hyperparams,
        "rng_state": ckpt.rng_state,
        "irm_dummy_w": ckpt.params.irm_dummy_w,
        "params": {name: _pack(getattr(ckpt.params, name)) for name in PARAM_NAMES},
        "adam": {
            "step": ckpt.adam.step,
            "m": {name: _pack(ckpt.adam.m[name]) for name in PARAM_NAMES},
            "v": {name: _pack(ckpt.adam.v[name]) for name in PARAM_NAMES},
        },
    }
    return json.dumps(document, sort_keys=True) + "\n"


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write a versioned JSON checkpoint; floats are stored with round-trip precision."""
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(checkpoint_to_json(ckpt))
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError("corrupt-checkpoint", f"{path}: {str(e)}")
    if not isinstance(document, dict) or document.get("version") != CHECKPOINT_VERSION:
        found = document.get("version") if isinstance(document, dict) else None
        raise CheckpointError("incompatible-checkpoint", f"{path}: version {found!r}, expected {CHECKPOINT_VERSION!r}")
    try:
        params = ModelParams.from_dict(
            {name: _unpack(document["params"][name]) for name in PARAM_NAMES},
            irm_dummy_w=float(document["irm_dummy_w"]),
        )
        adam = AdamState(
            m={name: _unpack(document["adam"]["m"][name]) for name in PARAM_NAMES},
            v={name: _unpack(document["adam"]["v"][name]) for name in PARAM_NAMES},
            step=int(document["adam"]["step"]),
        )
        return Checkpoint(
            params=params,
            adam=adam,
            hyperparams=dict(document["hyperparams"]),
            rng_state={k: int(v) for k, v in document["rng_state"].items()},
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError("corrupt-checkpoint", f"{path}: {str(e)}")


# Tables

def train_log_frame(log: TrainLog) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in log.records], columns=list(TRAIN_LOG_COLUMNS))


def save_table(frame: pd.DataFrame, path: str) -> None:
    """CSV with 6-decimal floats and a fixed column order."""
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")

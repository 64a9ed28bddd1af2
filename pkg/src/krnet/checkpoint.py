"""Framework-neutral checkpoint archives.

A checkpoint is an uncompressed zip holding JSON metadata plus raw
little-endian float32 blocks:

* ``format.json``            -- {"format": "krnet-checkpoint", "version": 1, "kind": ...}
* ``group_index.json``       -- recorder only; the grouping document
* ``decoder_config.json``    -- decoder hyper-parameters
* ``encoder_config.json``    -- autoencoder only; {"latent_dim": int}
* ``norm_stats.bin``         -- interleaved per-channel (min, max) float32 pairs
* ``weights_manifest.json``  -- ordered [{"name": str, "shape": [int, ...]}, ...]
* ``weights.bin``            -- the manifest's arrays concatenated row-major
* ``latent_bank.json``/``latent_bank.bin`` -- autoencoder only; {"N", "dim",
  "sample_ids"} sidecar plus the N x dim code block in sample_ids order

No framework-specific serialization is used, so any language that can read
zip + JSON + raw floats can load a checkpoint.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .autoencoder import FeatureAutoencoder
from .errors import ValidationError
from .grouping import GroupIndex
from .model import DecoderConfig, KRNet
from .normalization import NormalizationStats

FORMAT_NAME = "krnet-checkpoint"
FORMAT_VERSION = 1


def _float_state(model: torch.nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(k, v) for k, v in model.state_dict().items() if v.is_floating_point()]


def _pack_weights(entries: list[tuple[str, torch.Tensor]]) -> tuple[str, bytes]:
    manifest = []
    blob = io.BytesIO()
    for name, tensor in entries:
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy().astype("<f4"))
        manifest.append({"name": name, "shape": list(arr.shape)})
        blob.write(arr.tobytes())
    return json.dumps(manifest), blob.getvalue()


def _unpack_weights(manifest_text: str, blob: bytes) -> dict[str, torch.Tensor]:
    manifest = json.loads(manifest_text)
    out: dict[str, torch.Tensor] = {}
    offset = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[entry["name"]] = torch.from_numpy(arr.copy())
        offset += count * 4
    if offset != len(blob):
        raise ValidationError(f"weights block holds {len(blob)} bytes but the manifest covers {offset}")
    return out


def _write_archive(path, entries: dict[str, bytes | str]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in entries.items():
            zf.writestr(name, data)


def _load_weights_into(model: torch.nn.Module, weights: dict[str, torch.Tensor]):
    expected = {k for k, _ in _float_state(model)}
    missing = expected - weights.keys()
    extra = weights.keys() - expected
    if missing or extra:
        raise ValidationError(f"weight names do not match the model (missing={sorted(missing)}, extra={sorted(extra)})")
    model.load_state_dict(weights, strict=False)


def save_krnet(path, model: KRNet):
    if model.norm_stats is None:
        raise ValidationError("cannot checkpoint a recorder without normalization stats")
    manifest, blob = _pack_weights(_float_state(model))
    _write_archive(path, {
        "format.json": json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": "krnet"}),
        "group_index.json": model.group_index.to_json(),
        "decoder_config.json": json.dumps(model.config.to_dict()),
        "norm_stats.bin": model.norm_stats.to_bytes(),
        "weights_manifest.json": manifest,
        "weights.bin": blob,
    })


def save_autoencoder(path, model: FeatureAutoencoder):
    if model.norm_stats is None:
        raise ValidationError("cannot checkpoint an autoencoder without normalization stats")
    manifest, blob = _pack_weights(_float_state(model))
    entries = {
        "format.json": json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": "autoencoder"}),
        "decoder_config.json": json.dumps(model.config.to_dict()),
        "encoder_config.json": json.dumps({"latent_dim": model.latent_dim}),
        "norm_stats.bin": model.norm_stats.to_bytes(),
        "weights_manifest.json": manifest,
        "weights.bin": blob,
    }
    if model.latent_bank is not None:
        bank = np.ascontiguousarray(model.latent_bank.detach().cpu().numpy().astype("<f4"))
        entries["latent_bank.json"] = json.dumps({
            "N": int(bank.shape[0]), "dim": int(bank.shape[1]), "sample_ids": model.bank_sample_ids,
        })
        entries["latent_bank.bin"] = bank.tobytes()
    _write_archive(path, entries)


def checkpoint_kind(path) -> str:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("format.json"))
    if meta.get("format") != FORMAT_NAME:
        raise ValidationError(f"{path} is not a recorder checkpoint")
    return meta["kind"]


def load_krnet(path) -> KRNet:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("format.json"))
        if meta.get("kind") != "krnet":
            raise ValidationError(f"{path} holds a {meta.get('kind')} checkpoint, not a recorder")
        index = GroupIndex.from_json(zf.read("group_index.json").decode())
        config = DecoderConfig.from_dict(json.loads(zf.read("decoder_config.json")))
        stats = NormalizationStats.from_bytes(zf.read("norm_stats.bin"))
        weights = _unpack_weights(zf.read("weights_manifest.json").decode(), zf.read("weights.bin"))
    model = KRNet(index, config)
    _load_weights_into(model, weights)
    model.norm_stats = stats
    return model


def load_autoencoder(path) -> FeatureAutoencoder:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("format.json"))
        if meta.get("kind") != "autoencoder":
            raise ValidationError(f"{path} holds a {meta.get('kind')} checkpoint, not an autoencoder")
        config = DecoderConfig.from_dict(json.loads(zf.read("decoder_config.json")))
        latent_dim = json.loads(zf.read("encoder_config.json"))["latent_dim"]
        stats = NormalizationStats.from_bytes(zf.read("norm_stats.bin"))
        weights = _unpack_weights(zf.read("weights_manifest.json").decode(), zf.read("weights.bin"))
        names = set(zf.namelist())
        bank = bank_ids = None
        if "latent_bank.bin" in names:
            sidecar = json.loads(zf.read("latent_bank.json"))
            arr = np.frombuffer(zf.read("latent_bank.bin"), dtype="<f4").reshape(sidecar["N"], sidecar["dim"])
            bank, bank_ids = torch.from_numpy(arr.copy()), sidecar["sample_ids"]
    model = FeatureAutoencoder(latent_dim, config)
    _load_weights_into(model, weights)
    model.norm_stats = stats
    if bank is not None:
        model.latent_bank = bank
        model.bank_sample_ids = bank_ids
    return model


def stored_latent_bytes(path) -> int:
    """Latent payload bytes inside a checkpoint: embedding bank or code bank."""
    kind = checkpoint_kind(path)
    with zipfile.ZipFile(path) as zf:
        if kind == "krnet":
            manifest = json.loads(zf.read("weights_manifest.json"))
            total = 0
            for entry in manifest:
                if entry["name"].endswith(("static_vectors", "dynamic_vectors")):
                    total += int(np.prod(entry["shape"])) * 4
            return total
        return len(zf.read("latent_bank.bin"))

"""Single-file serialization of trained models.

A ``.daest`` file holds everything needed to run a trained model: the
encoder geometry and parameters, optionally the contrastive projector, the
MLP classifier, and the per-subject normalization state, plus provenance
(config hash, training-log digest).

Layout, all little-endian:

=========  =======================================================
bytes      field
=========  =======================================================
6          magic ``b"DAEST\\0"``
4          format version, uint32
4          header length, uint32
...        header JSON, utf-8
per section:
2          name length, uint16
...        name, utf-8
4          payload length, uint32
...        payload (one tensor snapshot)
4          CRC32 of the payload, uint32
=========  =======================================================

Sections appear in the order listed by the header, so identical models
serialize to identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from daest.classify import ClassifierParams, NormState
from daest.encoder import EncoderGeometry, EncoderParams
from daest.ndcore import DiffTensor
from daest.ndcore.snapshot import array_from_snapshot, snapshot_bytes
from daest.pretrain import ProjectorParams

__all__ = [
    "BundleError",
    "ModelBundle",
    "save_bundle",
    "load_bundle",
    "bundle_summary",
    "encoder_param_count",
    "projector_param_count",
    "classifier_param_count",
]

MAGIC = b"DAEST\0"
FORMAT_VERSION = 1


class BundleError(Exception):
    """Malformed, corrupted, or incompatible bundle files."""


# ---------------------------------------------------------------------------
# analytic parameter counts


def encoder_param_count(geometry: EncoderGeometry) -> int:
    """K1*L1 temporal taps + K*M*L2 spatial + K*L3 attention conv + K*K mix."""
    k1, l1 = geometry.n_temporal, geometry.temporal_len
    k, m, l2 = geometry.n_latent, geometry.n_channels, geometry.transition_steps
    l3 = geometry.attention_len
    return k1 * l1 + k * m * l2 + k * l3 + k * k


def projector_param_count(geometry: EncoderGeometry, groups: int | None = None) -> int:
    k = geometry.n_latent
    groups = geometry.n_temporal if groups is None else groups
    return 2 * k * (k // groups) * 3 + 4 * k * (2 * k // groups) * 3


def classifier_param_count(n_features: int, hidden: tuple[int, ...], n_classes: int) -> int:
    sizes = [n_features, *hidden, n_classes]
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


# ---------------------------------------------------------------------------
# bundle


@dataclass
class ModelBundle:
    geometry: EncoderGeometry
    encoder: EncoderParams
    projector: ProjectorParams | None = None
    classifier: ClassifierParams | None = None
    norm_state: NormState | None = None
    config_hash: str | None = None
    log_digest: str | None = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        counted = self.encoder.n_params
        expected = encoder_param_count(self.geometry)
        if counted != expected:
            raise BundleError(
                f"encoder holds {counted} parameters, geometry implies {expected}"
            )

    @property
    def n_params_encoder(self) -> int:
        return self.encoder.n_params

    @property
    def n_params_total(self) -> int:
        total = self.encoder.n_params
        if self.projector is not None:
            total += self.projector.n_params
        if self.classifier is not None:
            total += self.classifier.n_params
        return total

    def sections(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.named_arrays())
        if self.projector is not None:
            out.update(self.projector.named_arrays())
        if self.classifier is not None:
            out.update(self.classifier.named_arrays())
        if self.norm_state is not None:
            out["norm_mean"] = np.asarray(self.norm_state.mean, dtype=np.float64)
            out["norm_m2"] = np.asarray(self.norm_state.m2, dtype=np.float64)
        return out


def _header_dict(bundle: ModelBundle, section_names: list[str]) -> dict:
    header = {
        "format_version": bundle.format_version,
        "geometry": bundle.geometry.to_dict(),
        "sections": section_names,
        "config_hash": bundle.config_hash,
        "log_digest": bundle.log_digest,
        "n_params_encoder": bundle.n_params_encoder,
        "n_params_total": bundle.n_params_total,
    }
    if bundle.projector is not None:
        header["projector"] = {
            "groups": bundle.projector.groups,
            "pool_window": bundle.projector.pool_window,
            "pool_stride": bundle.projector.pool_stride,
        }
    if bundle.classifier is not None:
        header["classifier"] = {
            "n_classes": bundle.classifier.n_classes,
            "hidden": [w.shape[0] for w in bundle.classifier.weights[1:]],
            "weight_decay": bundle.classifier.weight_decay,
        }
    if bundle.norm_state is not None:
        header["norm_state"] = {
            "count": bundle.norm_state.count,
            "eps": bundle.norm_state.eps,
        }
    return header


def save_bundle(bundle: ModelBundle, path: str | os.PathLike) -> None:
    """Write the bundle; identical models produce identical bytes."""
    sections = bundle.sections()
    names = list(sections)
    header = json.dumps(
        _header_dict(bundle, names), sort_keys=True, separators=(",", ":")
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", bundle.format_version))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in names:
            payload = snapshot_bytes(sections[name])
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise BundleError(f"truncated bundle while reading {what}")
    return data


def load_bundle(path: str | os.PathLike) -> ModelBundle:
    """Read a bundle back; every section's checksum is verified."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "magic")
        if magic != MAGIC:
            raise BundleError(f"{path}: not a model bundle (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise BundleError(
                f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
            )
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, "header"))
        except json.JSONDecodeError as e:
            raise BundleError(f"{path}: unreadable header: {e}") from e
        arrays: dict[str, np.ndarray] = {}
        for expected_name in header["sections"]:
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "section name length"))
            name = _read_exact(fh, nlen, "section name").decode()
            if name != expected_name:
                raise BundleError(
                    f"{path}: section order mismatch ({name!r} vs {expected_name!r})"
                )
            (plen,) = struct.unpack("<I", _read_exact(fh, 4, "payload length"))
            payload = _read_exact(fh, plen, f"section {name}")
            (crc,) = struct.unpack("<I", _read_exact(fh, 4, "checksum"))
            if zlib.crc32(payload) != crc:
                raise BundleError(f"{path}: checksum mismatch in section {name!r}")
            arrays[name] = array_from_snapshot(payload)
        if fh.read(1):
            raise BundleError(f"{path}: trailing bytes after the last section")
    return _assemble(header, arrays)


def _require(arrays: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in arrays:
        raise BundleError(f"bundle is missing section {name!r}")
    return arrays[name]


def _assemble(header: dict, arrays: dict[str, np.ndarray]) -> ModelBundle:
    geometry = EncoderGeometry.from_dict(header["geometry"])
    encoder = EncoderParams(
        temporal=DiffTensor(_require(arrays, "temporal")),
        spatial=DiffTensor(_require(arrays, "spatial")),
        attn_conv=DiffTensor(_require(arrays, "attn_conv")),
        attn_mix=DiffTensor(_require(arrays, "attn_mix")),
    )
    projector = None
    if "projector" in header:
        meta = header["projector"]
        projector = ProjectorParams(
            conv1=DiffTensor(_require(arrays, "proj_conv1")),
            conv2=DiffTensor(_require(arrays, "proj_conv2")),
            groups=int(meta["groups"]),
            pool_window=int(meta["pool_window"]),
            pool_stride=int(meta["pool_stride"]),
        )
    classifier = None
    if "classifier" in header:
        meta = header["classifier"]
        n_layers = len(meta["hidden"]) + 1
        weights, biases = [], []
        for i in range(n_layers):
            weights.append(DiffTensor(_require(arrays, f"mlp_w{i}")))
            biases.append(DiffTensor(_require(arrays, f"mlp_b{i}")))
        classifier = ClassifierParams(
            weights=weights,
            biases=biases,
            n_classes=int(meta["n_classes"]),
            weight_decay=float(meta["weight_decay"]),
        )
    norm_state = None
    if "norm_state" in header:
        meta = header["norm_state"]
        mean = _require(arrays, "norm_mean")
        norm_state = NormState(
            n_features=mean.shape[0],
            eps=float(meta["eps"]),
            count=int(meta["count"]),
            mean=mean,
            m2=_require(arrays, "norm_m2"),
        )
    return ModelBundle(
        geometry=geometry,
        encoder=encoder,
        projector=projector,
        classifier=classifier,
        norm_state=norm_state,
        config_hash=header.get("config_hash"),
        log_digest=header.get("log_digest"),
        format_version=int(header["format_version"]),
    )


def bundle_summary(bundle: ModelBundle) -> dict:
    """Metadata for display: geometry, components, parameter counts."""
    return {
        "format_version": bundle.format_version,
        "geometry": bundle.geometry.to_dict(),
        "components": {
            "projector": bundle.projector is not None,
            "classifier": bundle.classifier is not None,
            "norm_state": bundle.norm_state is not None,
        },
        "n_params_encoder": bundle.n_params_encoder,
        "n_params_total": bundle.n_params_total,
        "config_hash": bundle.config_hash,
        "log_digest": bundle.log_digest,
    }

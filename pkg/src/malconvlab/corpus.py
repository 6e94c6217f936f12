"""Synthetic PE corpus with exact ground truth.

Every generated file is a structurally valid PE image: DOS header, PE
signature, COFF header, optional header, section table, then raw section
data aligned to ``file_alignment``. Because payload lengths are rarely
multiples of the alignment, almost every section carries a slack tail whose
location the generator knows exactly and records in a JSON sidecar,
independent of any parser.

Class content is separable by construction: each class plants contiguous
runs of its own repeated 16-byte motif over a uniform-random background.
Contiguous runs matter; they produce stable per-class window activations
that survive max-pooling even under a randomly initialized convolution,
which scattered single motifs at the same total density do not.
"""

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import BENIGN, MALWARE

DOS_HEADER_SIZE = 64
COFF_HEADER_SIZE = 20
OPTIONAL_HEADER_SIZE = 224
SECTION_ENTRY_SIZE = 40

MALWARE_MOTIF = bytes(range(0xA0, 0xB0))
BENIGN_MOTIF = bytes(range(0x40, 0x50))

_SECTION_NAMES = (".text", ".data", ".rsrc", ".rdata", ".reloc", ".tls")
_MAX_MOTIF_LEN = 49  # must stay under the default conv window of 50 bytes


def align_up(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


@dataclass(frozen=True)
class SynthConfig:
    """Shape of one synthetic PE file.

    ``num_sections`` and ``section_payload_size`` are inclusive ranges
    sampled per file and per section. Each class's motif is planted over
    roughly ``density`` of every section payload as 1 to 3 contiguous runs
    of the repeated motif at random offsets.
    """

    num_sections: tuple[int, int] = (1, 3)
    file_alignment: int = 512
    section_payload_size: tuple[int, int] = (128, 900)
    malicious_motif: bytes = MALWARE_MOTIF
    malicious_density: float = 0.6
    benign_motif: bytes = BENIGN_MOTIF
    benign_density: float = 0.6
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.num_sections
        if not 1 <= lo <= hi <= len(_SECTION_NAMES):
            raise ValueError(f"num_sections must satisfy 1 <= lo <= hi <= {len(_SECTION_NAMES)}")
        lo, hi = self.section_payload_size
        if not 1 <= lo <= hi:
            raise ValueError("section_payload_size must satisfy 1 <= lo <= hi")
        a = self.file_alignment
        if a < 16 or a & (a - 1):
            raise ValueError("file_alignment must be a power of two >= 16")
        for name in ("malicious_motif", "benign_motif"):
            motif = getattr(self, name)
            if not isinstance(motif, (bytes, bytearray)) or not motif:
                raise ValueError(f"{name} must be a non-empty byte string")
            if len(motif) > _MAX_MOTIF_LEN:
                raise ValueError(f"{name} must be shorter than one conv window ({_MAX_MOTIF_LEN + 1} bytes)")
        for name in ("malicious_density", "benign_density"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")

    def class_motif(self, label: int) -> bytes:
        return bytes(self.malicious_motif if label == MALWARE else self.benign_motif)

    def class_density(self, label: int) -> float:
        return self.malicious_density if label == MALWARE else self.benign_density


@dataclass(frozen=True)
class GroundTruth:
    """What the generator knows about one file, recorded before any parsing."""

    label: int
    size: int
    sections: list = field(default_factory=list)
    slack: list = field(default_factory=list)
    motif: str = ""
    motif_runs: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=0, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        return cls(**json.loads(text))


def _payload(rng: np.random.Generator, length: int, motif: bytes, density: float):
    """Random background overwritten by 1-3 contiguous runs of the motif.

    Total run coverage targets density * length; each run is at least one
    motif long. Returns the payload and the planted (offset, length) pairs.
    """
    buf = bytearray(rng.integers(0, 256, size=length, dtype=np.int64).astype(np.uint8).tobytes())
    runs = []
    cover = int(density * length)
    if cover >= 1:
        n_runs = int(rng.integers(1, 4))
        per = max(len(motif), cover // n_runs)
        for _ in range(n_runs):
            run = (motif * max(1, per // len(motif)))[:length]
            off = int(rng.integers(0, length - len(run) + 1))
            buf[off : off + len(run)] = run
            runs.append((off, len(run)))
    return bytes(buf), runs


def generate_synthetic_pe(
    cfg: SynthConfig, label: int, rng: np.random.Generator
) -> tuple[bytes, GroundTruth]:
    """Build one PE image plus its ground-truth record."""
    n_sections = int(rng.integers(cfg.num_sections[0], cfg.num_sections[1] + 1))
    e_lfanew = DOS_HEADER_SIZE
    table_offset = e_lfanew + 4 + COFF_HEADER_SIZE + OPTIONAL_HEADER_SIZE
    header_end = table_offset + n_sections * SECTION_ENTRY_SIZE
    headers_size = align_up(header_end, cfg.file_alignment)

    motif = cfg.class_motif(label)
    density = cfg.class_density(label)
    payloads = []
    payload_runs = []
    for _ in range(n_sections):
        length = int(
            rng.integers(cfg.section_payload_size[0], cfg.section_payload_size[1] + 1)
        )
        payload, runs = _payload(rng, length, motif, density)
        payloads.append(payload)
        payload_runs.append(runs)

    sections = []
    slack = []
    motif_runs = []
    raw_address = headers_size
    virtual_address = 0x1000
    for name, payload, runs in zip(_SECTION_NAMES, payloads, payload_runs):
        virtual_size = len(payload)
        raw_size = align_up(virtual_size, cfg.file_alignment)
        sections.append(
            {
                "name": name,
                "virtual_size": virtual_size,
                "virtual_address": virtual_address,
                "raw_size": raw_size,
                "raw_address": raw_address,
            }
        )
        if raw_size > virtual_size:
            slack.append(
                {
                    "section": name,
                    "start": raw_address + virtual_size,
                    "length": raw_size - virtual_size,
                }
            )
        motif_runs.extend([raw_address + off, run_len] for off, run_len in runs)
        raw_address += raw_size
        virtual_address = align_up(virtual_address + max(virtual_size, 1), 0x1000)
    total_size = raw_address

    image = bytearray(total_size)
    image[0:2] = b"MZ"
    struct.pack_into("<I", image, 0x3C, e_lfanew)
    image[e_lfanew : e_lfanew + 4] = b"PE\0\0"
    # COFF: machine=i386, sections, timestamp 0 for reproducible bytes,
    # no symbols, optional header size, characteristics EXE|32BIT.
    struct.pack_into(
        "<HHIIIHH",
        image,
        e_lfanew + 4,
        0x014C,
        n_sections,
        0,
        0,
        0,
        OPTIONAL_HEADER_SIZE,
        0x0102,
    )
    opt = e_lfanew + 4 + COFF_HEADER_SIZE
    struct.pack_into("<H", image, opt, 0x10B)
    struct.pack_into("<I", image, opt + 32, 0x1000)
    struct.pack_into("<I", image, opt + 36, cfg.file_alignment)

    for i, s in enumerate(sections):
        entry = table_offset + i * SECTION_ENTRY_SIZE
        image[entry : entry + 8] = s["name"].encode("latin-1").ljust(8, b"\0")
        struct.pack_into(
            "<IIII",
            image,
            entry + 8,
            s["virtual_size"],
            s["virtual_address"],
            s["raw_size"],
            s["raw_address"],
        )

    for s, payload in zip(sections, payloads):
        image[s["raw_address"] : s["raw_address"] + len(payload)] = payload

    truth = GroundTruth(
        label=label,
        size=total_size,
        sections=sections,
        slack=slack,
        motif=motif.hex(),
        motif_runs=motif_runs,
    )
    return bytes(image), truth


def _labels(count: int, malware_frac: float) -> list:
    """Evenly interleaved labels with floor(count * malware_frac) malware."""
    return [
        MALWARE if math.floor((i + 1) * malware_frac) > math.floor(i * malware_frac) else BENIGN
        for i in range(count)
    ]


def generate_corpus(cfg: SynthConfig, out_dir, count: int, malware_frac=0.5, test_frac=0.2):
    """Write a corpus of ``count`` files under ``out_dir``.

    Produces ``sample_NNNNN.bin`` plus a ``sample_NNNNN.json`` ground-truth
    sidecar for every file and a ``manifest.csv`` indexing them. Malware
    labels are interleaved evenly at ``malware_frac``; the last
    ``test_frac`` of files by generation order form the test split, so the
    split is a function of position, not of a separate random draw.
    Returns the manifest entries in file order.
    """
    from .store import ManifestEntry, write_manifest

    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= malware_frac <= 1:
        raise ValueError("malware_frac must be in [0, 1]")
    if not 0 <= test_frac <= 1:
        raise ValueError("test_frac must be in [0, 1]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = _labels(count, malware_frac)
    n_train = count - int(round(count * test_frac))
    entries = []
    for i in range(count):
        data, truth = generate_synthetic_pe(cfg, labels[i], np.random.default_rng((cfg.seed, i)))
        name = f"sample_{i:05d}.bin"
        (out_dir / name).write_bytes(data)
        (out_dir / name).with_suffix(".json").write_text(truth.to_json() + "\n")
        entries.append(
            ManifestEntry(
                path=name,
                label=labels[i],
                split="train" if i < n_train else "test",
                size=len(data),
                digest=hashlib.sha256(data).hexdigest(),
            )
        )
    write_manifest(entries, out_dir / "manifest.csv")
    return entries


def load_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_json(Path(path).read_text())

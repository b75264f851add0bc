"""Shared builders for toy models, fake decoders, and on-disk datasets."""

import json
from pathlib import Path

import numpy as np
import pytest

import oracles
from capkit.textpipe import END_ID, START_ID, Vocabulary
from capkit.transformer import CaptionModel, ModelConfig
from capkit.vision import FeatureMap, Image, dump_ppm, write_feature_file


def make_config(vocab_size=6, dim=4, **overrides):
    base = dict(vocab_size=vocab_size, sources={"resnet50": dim}, d_model=8, h=2,
                layers_enc=1, layers_dec=1, d_ff=16, max_len=6)
    base.update(overrides)
    return ModelConfig(**base)


def make_model(seed=0, **overrides):
    cfg = make_config(**overrides)
    return CaptionModel(cfg, seed=seed), cfg


def make_feature(dim=4, seed=0, source="resnet50"):
    rng = np.random.default_rng(seed)
    return FeatureMap(source=source, values=rng.normal(0, 1, dim).astype(np.float32))


class RandomLogitModel:
    """Fake decoder model: logits are a pure function of the prefix."""

    def __init__(self, vocab_size, seed, spread=3.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.spread = spread

    def next_token_logits(self, ids, memory):
        rng = np.random.default_rng([self.seed, *ids])
        return rng.normal(0.0, self.spread, self.vocab_size).astype(np.float32)


def exhaustive_decode(model, memory, vocab_size, max_len):
    """Every complete sequence with its exact cumulative log-probability."""
    results = []

    def walk(ids, logprob):
        if ids[-1] == END_ID or len(ids) >= max_len:
            results.append((logprob, ids))
            return
        logprobs = oracles.log_softmax_64(model.next_token_logits(ids, memory))
        for token in range(vocab_size):
            walk(ids + [token], logprob + float(logprobs[token]))

    walk([START_ID], 0.0)
    return results


def make_vocab(words):
    return Vocabulary.from_words(list(words))


PHRASES = [
    "a dog runs on the grass",
    "a dog plays on green grass",
    "two dogs run across a field",
    "a cat sits on a mat",
    "a cat sleeps on the mat",
    "a bird flies over water",
    "a bird sits on a branch",
    "a child throws a red ball",
]


def build_dataset(root: Path, n_images=4, dim=8, seed=0, side=16,
                  captions_per_image=2):
    """Write a complete toy dataset: images, captions, features, manifest."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    ids = [f"img{i:03d}" for i in range(n_images)]

    caption_lines = []
    for i, image_id in enumerate(ids):
        for j in range(captions_per_image):
            text = PHRASES[(i + j) % len(PHRASES)]
            caption_lines.append(f"{image_id}#{j}\t{text}")
    captions_path = root / "captions.txt"
    captions_path.write_text("\n".join(caption_lines) + "\n", encoding="utf-8")

    features = {}
    for image_id in ids:
        vec = rng.normal(0, 1, dim).astype(np.float32)
        features[image_id] = FeatureMap(source="resnet50", values=vec)
        pixels = rng.random((side, side, 3)).astype(np.float32)
        (images_dir / f"{image_id}.ppm").write_bytes(dump_ppm(Image(pixels=pixels)))
    features_path = root / "resnet50.capf"
    features_path.write_bytes(write_feature_file(features))

    if n_images < 3:
        raise ValueError("build_dataset needs >= 3 images for disjoint splits")
    n_train = n_images - 2
    splits = {"train": ids[:n_train], "val": [ids[n_train]], "test": [ids[n_train + 1]]}
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps({
        "captions_path": "captions.txt",
        "features_paths": {"resnet50": "resnet50.capf"},
        "splits": splits,
        "images_dir": "images",
    }, indent=2), encoding="utf-8")
    return {"root": root, "manifest": manifest_path, "captions": captions_path,
            "features": features_path, "images_dir": images_dir, "ids": ids,
            "splits": splits}


def write_train_config(path: Path, model=None, train=None):
    payload = {"model": model or {}, "train": train or {}}
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def toy_dataset(tmp_path):
    return build_dataset(tmp_path, n_images=5, dim=8, seed=7)

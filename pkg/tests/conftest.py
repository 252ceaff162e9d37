"""Shared fixtures: generated artifacts on disk, config factories, engines."""

from __future__ import annotations

import json
import os

import pytest

from slotserve import REFERENCE_ARCH, draft_arch_for
from slotserve.generator import generate_artifact_file


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory):
    import dataclasses

    d = tmp_path_factory.mktemp("artifacts")
    generate_artifact_file(str(d / "base.efmt"), seed=1)
    generate_artifact_file(str(d / "base2.efmt"), seed=2)
    generate_artifact_file(str(d / "draft.efmt"), seed=3, arch=draft_arch_for(REFERENCE_ARCH))
    bad_draft = dataclasses.replace(draft_arch_for(REFERENCE_ARCH), n_feature_taps=2)
    generate_artifact_file(str(d / "draft_bad.efmt"), seed=4, arch=bad_draft)
    return d


@pytest.fixture
def make_config(artifact_dir, tmp_path):
    """Write an engine config JSON and return its path."""

    def _make(**overrides) -> str:
        doc = {
            "prefill_artifact_path": str(artifact_dir / "base.efmt"),
            "slots": [{"request_id": "a", "prefix_tokens": [], "max_new_tokens": 96}],
            "capture_decode_plan": True,
            "seed": 0,
        }
        doc.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return str(path)

    return _make


@pytest.fixture
def spec_config(make_config, artifact_dir):
    """Config with speculative decoding enabled."""

    def _make(block_len=4, **overrides) -> str:
        return make_config(
            draft_artifact_path=str(artifact_dir / "draft.efmt"),
            speculative={"enabled": True, "block_len": block_len},
            **overrides,
        )

    return _make

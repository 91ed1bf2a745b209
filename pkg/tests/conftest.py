import warnings

import numpy as np
import pytest

from codec_lm import codec, corpus

warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    """Small deterministic corpus shared by read-only tests."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = corpus.CorpusConfig(
        out_dir=out,
        speakers=4,
        held_out_speakers=1,
        utterances_per_speaker=2,
        duration_min=3.5,
        duration_max=4.5,
        seed=7,
    )
    corpus.build_corpus(cfg)
    return out


@pytest.fixture(scope="session")
def tiny_codec(tiny_corpus_dir):
    """Codebooks trained on the tiny corpus (small K for speed)."""
    from codec_lm import formats, pipeline

    data = pipeline.load_corpus(tiny_corpus_dir)
    waves = [
        corpus.Waveform(*formats.read_audio(r.path)) for r in data.split_records("train")
    ]
    cfg = codec.CodecConfig(codebook_size=64, kmeans_iters=8, seed=3, pitch_augment=0.0)
    return codec.train_codebooks(waves, cfg)

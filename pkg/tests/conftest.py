import pytest

from deskvc.data import load_manifest, synth_dataset
from deskvc.encoders import SpeakerPretrainConfig, pretrain_speaker_encoder
from deskvc.features import compute_feature_set


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("smallcorpus")
    return synth_dataset(8, 12, root, seed=123)


@pytest.fixture(scope="session")
def small_entries(small_corpus):
    return load_manifest(small_corpus)


@pytest.fixture(scope="session")
def small_features(small_entries):
    return compute_feature_set(small_entries)


@pytest.fixture(scope="session")
def small_speaker_encoder(small_entries):
    return pretrain_speaker_encoder(small_entries, SpeakerPretrainConfig(seed=7))

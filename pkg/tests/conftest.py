import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from forelem import ingest  # noqa: E402

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CORPUS = os.path.join(ROOT, "corpus")
BENCH = os.path.join(ROOT, "bench")


@pytest.fixture(scope="session")
def corpus_schema():
    return ingest.load_schema(os.path.join(CORPUS, "schema.txt"))


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory, corpus_schema):
    out = str(tmp_path_factory.mktemp("data_small"))
    spec = ingest.load_genspec(os.path.join(CORPUS, "gen_small.txt"))
    ingest.generate(spec, out, corpus_schema)
    return out


@pytest.fixture(scope="session")
def small_db(small_data_dir, corpus_schema):
    return ingest.load_database(small_data_dir, corpus_schema)


@pytest.fixture(scope="session")
def small_stats(small_db):
    return ingest.compute_stats(small_db)


def corpus_sql(name: str) -> str:
    with open(os.path.join(CORPUS, f"{name}.sql"), "r", encoding="utf-8") as fh:
        return fh.read()

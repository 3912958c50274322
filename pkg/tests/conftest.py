import numpy as np
import pytest

from mvix import DocumentRecord, TokenEmbeddings, normalize_rows


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_records(rng, count=3, tokens=5, dim=8, with_salience=False, prefix="d"):
    records = []
    for i in range(count):
        vectors = normalize_rows(rng.standard_normal((tokens, dim)))
        token_ids = rng.integers(0, 1000, tokens, dtype=np.uint32)
        salience = rng.uniform(0, 1, tokens).astype(np.float32) if with_salience else None
        records.append(DocumentRecord(f"{prefix}{i}", TokenEmbeddings(vectors, token_ids, salience)))
    return records

import hashlib

import numpy as np
import pytest

from sentseg.embeddings import (
    EmbeddingConfig,
    EmbeddingTable,
    build_table,
    load_embeddings,
    tokenize,
)
from sentseg.errors import ConfigError, InputError, ParseError


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("The  red. Square!") == ["the", "red", "square"]
    assert tokenize('a "quoted" word,') == ["a", "quoted", "word"]


def test_tokenize_drops_tokens_that_become_empty():
    assert tokenize("... !? ok") == ["ok"]
    assert tokenize("") == []
    assert tokenize("   ") == []


def test_table_returns_stored_vectors_exactly():
    v = np.array([1.0, -2.0, 0.5])
    table = EmbeddingTable(3, entries={"cat": v})
    assert np.array_equal(table.lookup("cat"), v)
    assert "cat" in table
    assert "dog" not in table
    assert len(table) == 1


def test_fallback_matches_keyed_hash_recipe():
    # Recompute the synthesized vector from scratch to freeze the scheme.
    table = EmbeddingTable(5, fallback_seed=9)
    key = (9).to_bytes(8, "little")
    digest = hashlib.blake2b(b"zebra", key=key, digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    expected = rng.standard_normal(5)
    expected = expected / np.linalg.norm(expected)
    assert np.array_equal(table.lookup("zebra"), expected)


def test_fallback_is_deterministic_and_unit_norm():
    table = EmbeddingTable(8, fallback_seed=3)
    a = table.lookup("flibbertigibbet")
    b = table.lookup("flibbertigibbet")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
    assert not np.array_equal(a, table.lookup("gibbet"))


def test_fallback_depends_on_seed():
    a = EmbeddingTable(4, fallback_seed=0).lookup("cat")
    b = EmbeddingTable(4, fallback_seed=1).lookup("cat")
    assert not np.array_equal(a, b)


def test_lookup_rejects_empty_token():
    with pytest.raises(InputError):
        EmbeddingTable(4).lookup("")


def test_table_rejects_bad_dim():
    with pytest.raises(ConfigError):
        EmbeddingTable(0)


def test_load_embeddings_round_trip(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("cat 1.0 2.0 3.0\ndog -1.0 0.5 0.25\n")
    table = load_embeddings(path, dim=3)
    assert np.array_equal(table.lookup("cat"), [1.0, 2.0, 3.0])
    assert np.array_equal(table.lookup("dog"), [-1.0, 0.5, 0.25])
    assert len(table) == 2


def test_load_embeddings_dim_mismatch_is_config_error(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("cat 1.0 2.0\n")
    with pytest.raises(ConfigError):
        load_embeddings(path, dim=3)


def test_load_embeddings_arity_deviation_names_the_line(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("cat 1.0 2.0\ndog 1.0\n")
    with pytest.raises(ParseError) as err:
        load_embeddings(path, dim=2)
    assert err.value.line == 2
    assert "line 2" in str(err.value)


def test_load_embeddings_rejects_non_numeric_and_non_finite(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("cat 1.0 two\n")
    with pytest.raises(ParseError) as err:
        load_embeddings(bad, dim=2)
    assert err.value.line == 1

    inf = tmp_path / "inf.txt"
    inf.write_text("cat 1.0 2.0\ndog inf 0.0\n")
    with pytest.raises(ParseError) as err:
        load_embeddings(inf, dim=2)
    assert err.value.line == 2


def test_load_embeddings_keeps_first_duplicate(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("cat 1.0\ncat 2.0\n")
    table = load_embeddings(path, dim=1)
    assert np.array_equal(table.lookup("cat"), [1.0])


def test_load_embeddings_empty_file(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("\n   \n")
    with pytest.raises(ParseError) as err:
        load_embeddings(path, dim=3)
    assert err.value.line == 1


def test_build_table_with_and_without_path(tmp_path):
    assert len(build_table(EmbeddingConfig(dim=4))) == 0
    path = tmp_path / "vectors.txt"
    path.write_text("cat 1.0 0.0 0.0 0.0\n")
    table = build_table(EmbeddingConfig(dim=4, path=str(path), fallback_seed=2))
    assert "cat" in table
    assert table.fallback_seed == 2

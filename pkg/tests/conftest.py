import pytest

from conceptlm import conceptset, corpus, model


@pytest.fixture(scope="session")
def tiny_vocab():
    # 2 domains x 3 concepts x 4 tokens + 20 function + <bos> = 45 tokens
    return corpus.build_vocabulary(2, 3, 4, 20, seed=7)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_vocab):
    return corpus.generate_corpus(tiny_vocab, 40, "A", 0.28, seed=3,
                                  min_len=8, max_len=24)


@pytest.fixture(scope="session")
def tiny_params(tiny_vocab):
    cfg = model.ModelConfig(vocab_size=tiny_vocab.n_tokens, d_model=16,
                            n_heads=2, n_layers=2, max_context=32,
                            mlp_ratio=2)
    return model.init_params(cfg, seed=11)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_params, tiny_corpus, tiny_vocab):
    provider = conceptset.OracleProvider(tiny_vocab)
    return conceptset.build_dataset(tiny_params, tiny_corpus, provider,
                                    k=200, cap=10)


@pytest.fixture(scope="session")
def grad_params():
    # 888 parameters, small enough for exhaustive finite differences
    cfg = model.ModelConfig(vocab_size=13, d_model=8, n_heads=2, n_layers=1,
                            max_context=12, mlp_ratio=2)
    return model.init_params(cfg, seed=1)

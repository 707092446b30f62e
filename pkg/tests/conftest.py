import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest

from clapaug.data import SampleRecord, ToySpec, generate_toy_dataset
from clapaug.encoders import DualEncoder, ModelConfig
from clapaug.tokenizer import tokenize

DATA = Path(__file__).parent / "data"


@pytest.fixture
def small_config():
    return ModelConfig(feature_dim=6, vocab_buckets=64, token_embed_dim=5, hidden_dim=7, embed_dim=4, seed=0)


@pytest.fixture
def small_model(small_config):
    return DualEncoder(small_config)


def make_records(n, feature_dim=6, k=4, seed=0):
    rng = np.random.default_rng(seed)
    words = ["dog", "bark", "rain", "roof", "engine", "idle", "bell", "ring", "wind", "door"]
    out = []
    for i in range(n):
        a, b = rng.choice(len(words), size=2, replace=False)
        cap = f"the {words[a]} and {words[b]} number{i}"
        rw = [f"variant {j} {words[a]} {words[b]} number{i}" for j in range(k)]
        out.append(SampleRecord(f"r{i}", cap, rng.normal(size=feature_dim).astype(np.float32), rw))
    return out


@pytest.fixture
def records():
    return make_records(12)


@pytest.fixture(scope="session")
def small_toy():
    return generate_toy_dataset(ToySpec(n_classes=4, samples_per_class=12, eval_per_class=5, seed=3))


class ChatServer:
    """Local chat-completion endpoint; ``handler(body) -> (status, text)`` decides replies."""

    def __init__(self, handler):
        self.handler = handler
        self.requests = []
        outer = self

        class H(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append({"body": body, "auth": self.headers.get("Authorization")})
                status, text = outer.handler(body)
                payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]})
                data = payload.encode() if status == 200 else b'{"error": "fail"}'
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), H)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def chat_server():
    servers = []

    def start(handler):
        s = ChatServer(handler).__enter__()
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.__exit__(None, None, None)


def full_loss_grad_check(model, features, captions, h=1e-5):
    """Worst per-tensor relative error of the composed encoder + contrastive loss gradient."""
    from clapaug.contrastive import loss_and_backward
    from clapaug.nn import grad_check_params

    def run():
        loss = loss_and_backward(model, features, captions)
        return loss, model.grads()

    return grad_check_params(model.params(), run, h=h)


KINK_MARGIN = 1e-3


def relu_margin(model, features, captions):
    """Smallest |pre-activation| feeding a ReLU in either encoder."""
    from clapaug.nn import ReLU
    seqs = model.embedding.forward([tokenize(c, model.config.vocab_buckets) for c in captions])
    margin = np.inf
    for stack, x in ((model.audio, np.asarray(features, dtype=np.float64)), (model.text, seqs)):
        for layer in stack.layers:
            if isinstance(layer, ReLU):
                margin = min(margin, float(np.min(np.abs(x))))
            x = layer.forward(x)
    return margin


def random_encoder_case(rng, redraws=None):
    """Random small dual encoder and batch, kept clear of ReLU kinks.

    Central differences straddling a ReLU kink are not a valid reference, so a
    case with a pre-activation within ``KINK_MARGIN`` of zero is redrawn; the
    count goes to ``redraws`` when given.
    """
    while True:
        cfg = ModelConfig(feature_dim=int(rng.integers(1, 9)), vocab_buckets=int(rng.integers(4, 33)),
                          token_embed_dim=int(rng.integers(1, 7)), hidden_dim=int(rng.integers(2, 9)),
                          embed_dim=int(rng.integers(2, 7)), seed=int(rng.integers(1 << 31)))
        model = DualEncoder(cfg)
        # nonzero biases keep pre-normalization rows away from the origin
        for name, p, _ in model.named_parameters():
            if name.endswith("bias"):
                p[...] = rng.normal(scale=0.3, size=p.shape)
        B = int(rng.integers(2, 6))
        vocab = ["dog", "bark", "rain", "roof", "bell", "ring", "wind", "door", "car", "horn"]
        captions = [" ".join(rng.choice(vocab, size=int(rng.integers(1, 5)))) for _ in range(B)]
        features = rng.normal(size=(B, cfg.feature_dim))
        if relu_margin(model, features, captions) >= KINK_MARGIN:
            return model, features, captions
        if redraws is not None:
            redraws.append(cfg)

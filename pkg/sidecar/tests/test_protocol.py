import json
import socket
import subprocess
import sys
import time
from pathlib import Path

FIXTURE = Path(__file__).parent / "fixtures" / "conformance.json"


def test_recorded_conformance_suite():
    """Replay the frozen request/response transcript byte-for-byte."""
    doc = json.loads(FIXTURE.read_text())
    proc = subprocess.Popen(
        [sys.executable, "-m", "sidecar", "serve", "--stdio",
         *doc["serve_args"]],
        stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)
    try:
        for exchange in doc["exchanges"]:
            proc.stdin.write(exchange["send"] + "\n")
            proc.stdin.flush()
            response = json.loads(proc.stdout.readline())
            assert response == exchange["expect"], exchange["send"]
    finally:
        proc.stdin.close()
        assert proc.wait(timeout=10) == 0


def test_one_response_per_request_in_order():
    doc = json.loads(FIXTURE.read_text())
    proc = subprocess.run(
        [sys.executable, "-m", "sidecar", "serve", "--stdio",
         *doc["serve_args"]],
        input="".join(e["send"] + "\n" for e in doc["exchanges"]),
        capture_output=True, text=True, timeout=60)
    responses = proc.stdout.strip().splitlines()
    assert len(responses) == len(doc["exchanges"])
    ids = [json.loads(r)["id"] for r in responses]
    assert ids == [e["expect"]["id"] for e in doc["exchanges"]]


def test_tcp_transport():
    proc = subprocess.Popen(
        [sys.executable, "-m", "sidecar", "serve", "--tcp", "127.0.0.1:0",
         "--seed", "2", "--dim", "8", "--max-connections", "1"],
        stderr=subprocess.PIPE, text=True, bufsize=1)
    try:
        announce = json.loads(proc.stderr.readline())
        port = announce["listening"]["port"]
        with socket.create_connection(("127.0.0.1", port), timeout=10) as conn:
            writer = conn.makefile("w", encoding="utf-8")
            reader = conn.makefile("r", encoding="utf-8")
            writer.write(json.dumps({"id": 1, "op": "hello",
                                     "params": {}}) + "\n")
            writer.flush()
            hello = json.loads(reader.readline())
            assert hello["ok"] and hello["result"]["dim"] == 8
            writer.write(json.dumps(
                {"id": 2, "op": "embed_text",
                 "params": {"prompts": ["lamp"]}}) + "\n")
            writer.flush()
            emb = json.loads(reader.readline())
            assert emb["id"] == 2 and emb["ok"]
            assert len(emb["result"]["embeddings"][0]) == 8
            writer.close()
            reader.close()
    finally:
        assert proc.wait(timeout=10) == 0


def test_seed_changes_embeddings():
    def embed(seed):
        out = subprocess.run(
            [sys.executable, "-m", "sidecar", "serve", "--stdio",
             "--seed", str(seed), "--dim", "8"],
            input=json.dumps({"id": 1, "op": "embed_text",
                              "params": {"prompts": ["mug"]}}) + "\n",
            capture_output=True, text=True, timeout=60)
        return json.loads(out.stdout)["result"]["embeddings"][0]

    assert embed(1) != embed(2)
    assert embed(3) == embed(3)

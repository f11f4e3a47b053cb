# dry_run_hyfl.py
import logging

from db.client import get_log_level
from logic.config import parse_config
from logic.data_plane import synthetic_dataset
from logic.orchestrator import build_report, run_training

logging.basicConfig(level=get_log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

# Mock Data
data = synthetic_dataset(3500, seed=1)
train_set, test_set = data.subset(range(3000)), data.subset(range(3000, 3500))

cfg = parse_config(text="""
mode = hyfl
rounds = 5
model.arch = mlp
clients.total = 40
clusters.count = 4
clusters.clients_per_cluster = 10
clusters.sample_per_round = 2
data.shard_size = 50
train.epochs = 1
agg.name = tm_variant
trim.alpha = 1
trim.beta = 100
attack.kind = slf
attack.rate = 0.2
attack.placement = focused
""")

print("Running Dry Run...")
result = run_training(cfg, train_set, test_set)
report = build_report(result)

print("\n--- RESUMEN RONDAS ---")
for m in result.metrics:
    print(f"round {m.round}: acc {m.accuracy:.4f} | {m.bytes} bytes | {m.comparisons} comparisons | excluded {m.excluded_ids}")

print("\n--- COSTO TOTAL ---")
for key, value in report["cost"].items():
    print(f"{key}: {value}")
print(f"malicious clients: {report['malicious_clients']}")
print(f"mean upload per client: {report['mean_upload_bytes_per_client']:.0f} bytes")

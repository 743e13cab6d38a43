"""Train a small tagger on synthetic clips, then print predicted air times.

Takes a few minutes on one CPU core. Run: python3 demos/train_and_predict.py
"""

from airtime.dataset import split_records
from airtime.inference import evaluate_model, flights_with_air_time, predict_tags
from airtime.model import ModelConfig
from airtime.synthetic import SynthConfig, generate_synthetic
from airtime.training import TrainConfig, train

records = generate_synthetic(SynthConfig(n_videos=60), seed=1)
train_set, test_set = split_records(records, seed=0)

checkpoint = train(train_set, TrainConfig(epochs=15, lr=1e-3, seed=0), ModelConfig(H=32),
                   on_epoch=lambda n, loss: print(f"epoch {n:2d}  loss {loss:.4f}"))
model = checkpoint.to_model()

print()
print(evaluate_model(model, test_set).table("held-out clips"))
print()
for record, tags in list(zip(test_set, predict_tags(model, test_set)))[:5]:
    gold = [round((f.end - f.start - 1) / record.fps, 3) for f in record.flights]
    guess = [round(f["air_time"], 3) for f in flights_with_air_time(tags, record.fps)]
    print(f"{record.video_id:>12}  {record.category:<6} gold {gold}  predicted {guess}")

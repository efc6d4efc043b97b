"""Default benchmark configurations.

These dicts feed ExperimentConfig.from_dict and are mirrored by the JSON
files under configs/. The traffic preset is the default acceptance
benchmark: 3 hourly source cities, 1 scarce target, 4 demand archetypes.
"""


def traffic_benchmark():
    return {
        "stnet": {
            "patch_size": 5,
            "channels": 1,
            "out_channels": 1,
            "cnn_layers": 1,
            "cnn_filters": 6,
            "kernel_size": 3,
            "spatial_dim": 10,
            "lstm_hidden_dim": 12,
            "window_len": 8,
        },
        "meta": {
            "inner_lr": 0.01,
            "outer_lr": 0.002,
            "inner_steps": 1,
            "meta_batch_cities": 2,
            "task_batch_size": 32,
            "max_meta_iters": 1000,
            "gamma": 0.003,
            "second_order": False,
            "meta_optimizer": "adam",
            "adapt_steps": 200,
            "adapt_batch_size": 64,
        },
        "synth": {
            "preset": "traffic",
            "sources": [
                {"city_id": f"src{k}", "rows": 6, "cols": 6, "periods": 720,
                 "noise_sigma": 0.1, "scale_range": [0.7, 1.4]}
                for k in range(3)
            ],
            "targets": [
                {"city_id": "tgt", "rows": 6, "cols": 6, "periods": 192,
                 "noise_sigma": 0.1, "scale_range": [0.7, 1.4]}
            ],
        },
        "memory_patterns": 4,
        "memory_dim": 8,
        "cluster_metric": "euclidean",
        "target_split": "target-1",
        "methods": ["ha", "arima-lite", "st-net", "single-ft", "multi-ft",
                    "maml", "metast"],
        "seeds": [0, 1, 2, 3, 4],
        "reference_method": "maml",
    }


def water_benchmark():
    """Monthly water-quality preset: coarser grids, 12-phase period."""
    return {
        "stnet": {
            "patch_size": 3,
            "channels": 1,
            "out_channels": 1,
            "cnn_layers": 1,
            "cnn_filters": 4,
            "kernel_size": 3,
            "spatial_dim": 8,
            "lstm_hidden_dim": 10,
            "window_len": 6,
        },
        "meta": {
            "inner_lr": 0.01,
            "outer_lr": 0.002,
            "inner_steps": 1,
            "meta_batch_cities": 2,
            "task_batch_size": 32,
            "max_meta_iters": 600,
            "gamma": 0.003,
            "second_order": False,
            "meta_optimizer": "adam",
            "adapt_steps": 150,
            "adapt_batch_size": 64,
        },
        "synth": {
            "preset": "water",
            "sources": [
                {"city_id": f"basin{k}", "rows": 4, "cols": 4, "periods": 240,
                 "noise_sigma": 0.1, "scale_range": [0.7, 1.4]}
                for k in range(3)
            ],
            "targets": [
                {"city_id": "basin_t", "rows": 4, "cols": 4, "periods": 60,
                 "noise_sigma": 0.1, "scale_range": [0.7, 1.4]}
            ],
        },
        "memory_patterns": 3,
        "memory_dim": 8,
        "cluster_metric": "dtw",
        "target_split": "target-1",
        "methods": ["ha", "st-net", "multi-ft", "maml", "metast"],
        "seeds": [0, 1, 2],
        "reference_method": "maml",
    }

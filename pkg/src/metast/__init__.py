"""Cross-city spatial-temporal forecasting with meta-learned initializations.

Subpackages are plain modules; import what you need:

* ``tensor``      float64 autodiff engine (double-backward capable)
* ``params``      ParamSet, SGD/Adam, binary checkpoints
* ``stnet``       CNN + LSTM base predictor
* ``stmem``       clustered pattern memory with attention
* ``meta``        bilevel meta-training and target-city adaptation
* ``clustering``  periodic profiles, K-means (Euclidean/DTW), ARI
* ``data``        grids, normalization, sampling, synthetic benchmark
* ``baselines``   historical average, AR, pretrain+fine-tune
* ``metrics``     RMSE and paired t-tests
* ``experiment``  multi-seed benchmark driver, sweeps, reports
* ``acceptance``  self-checking release gate
"""

__version__ = "0.1.0"

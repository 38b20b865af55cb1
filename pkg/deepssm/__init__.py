# Deep multi-linear state-space forecasting package

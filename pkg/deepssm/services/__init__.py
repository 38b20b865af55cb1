# Numerical services: model core, inference, learning, pipeline, evaluation

LOGGER_NAME = "lrmomentum"

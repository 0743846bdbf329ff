# UI module: optional rendering of experiment outputs

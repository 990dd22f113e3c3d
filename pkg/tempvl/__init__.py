# Text-video localization pre-training

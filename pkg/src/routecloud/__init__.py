"""Point-cloud placement evaluator: grid attention encoder, conv decoder, LDS loss."""

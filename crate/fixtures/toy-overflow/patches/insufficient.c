char *decode_record(const unsigned char *data, size_t size)
{
    size_t len;
    size_t i;
    char *out;

    if (data == NULL || size < 1)
        return NULL;
    len = data[0];
    out = malloc(len + 1);
    if (out == NULL)
        return NULL;
    for (i = 0; i < len && out != NULL; i++)
        out[i] = (char)data[1 + i];
    out[len] = '\0';
    return out;
}
